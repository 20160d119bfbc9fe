//! Hierarchical attention feature distiller.
//!
//! Stage one scores the `k` sub-patches of every patch with a gated
//! attention block and pools them into one `d`-vector per patch (`V`).
//! Stage two runs `M` attention branches over the `N` pooled patches; the
//! branch attentions are averaged into `α`, pooled into the slide embedding
//! `h = αᵀV` and classified by a shared linear head.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, ArrayView3, ArrayViewD, ArrayViewMutD, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datagen::{derive_seed, FeatureBag};
use crate::error::{Error, Result};
use crate::tensor::{
    masked_softmax, prefixed, prefixed_mut, softmax_backward, GatedAttention, Linear, Objective,
    Optimizer, OptimizerConfig, ParamSet, Schedule,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HafedConfig {
    pub d: usize,
    pub k: usize,
    pub hidden: usize,
    /// Attention branches in stage two.
    pub branches: usize,
    pub mask_top_n_stage1: usize,
    pub mask_top_n_stage2: usize,
    pub mask_prob: f64,
    pub w_final: f64,
    pub w_branch: f64,
    pub w_div: f64,
}

impl Default for HafedConfig {
    fn default() -> Self {
        HafedConfig {
            d: 32,
            k: 16,
            hidden: 128,
            branches: 5,
            mask_top_n_stage1: 4,
            mask_top_n_stage2: 8,
            mask_prob: 0.4,
            w_final: 1.0,
            w_branch: 1.0,
            w_div: 1.0,
        }
    }
}

impl HafedConfig {
    pub fn validate(&self) -> Result<()> {
        if self.branches < 1 {
            return Err(Error::config("branches", "need at least one attention branch"));
        }
        if !(0.0..=1.0).contains(&self.mask_prob) {
            return Err(Error::config("mask_prob", "must lie in [0, 1]"));
        }
        if self.d < 1 || self.k < 1 || self.hidden < 1 {
            return Err(Error::config("d/k/hidden", "must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HafedParams {
    pub stage1: GatedAttention,
    pub stage2: GatedAttention,
    pub head: Linear,
}

impl HafedParams {
    pub fn new(config: &HafedConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok(HafedParams {
            stage1: GatedAttention::new(&mut rng, config.d, config.hidden, 1),
            stage2: GatedAttention::new(&mut rng, config.d, config.hidden, config.branches),
            head: Linear::new(&mut rng, config.d, 2),
        })
    }

    pub fn d(&self) -> usize {
        self.stage1.in_dim()
    }

    pub fn branches(&self) -> usize {
        self.stage2.heads()
    }
}

impl ParamSet for HafedParams {
    fn visit(&self, f: &mut dyn FnMut(&str, ArrayViewD<'_, f64>)) {
        self.stage1.visit(&mut prefixed("stage1", f));
        self.stage2.visit(&mut prefixed("stage2", f));
        self.head.visit(&mut prefixed("head", f));
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, ArrayViewMutD<'_, f64>)) {
        self.stage1.visit_mut(&mut prefixed_mut("stage1", f));
        self.stage2.visit_mut(&mut prefixed_mut("stage2", f));
        self.head.visit_mut(&mut prefixed_mut("head", f));
    }
}

/// Stochastic instance masking: with probability `prob`, the `top_n`
/// highest-scoring instances are dropped. At least one instance always
/// survives.
fn draw_mask<R: Rng + ?Sized>(scores: ArrayView1<'_, f64>, top_n: usize, prob: f64, rng: &mut R) -> Vec<bool> {
    let n = scores.len();
    let mut mask = vec![false; n];
    if top_n == 0 || n < 2 || !rng.gen_bool(prob) {
        return mask;
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|a, b| scores[*b].total_cmp(&scores[*a]).then(a.cmp(b)));
    for &i in order.iter().take(top_n.min(n - 1)) {
        mask[i] = true;
    }
    mask
}

/// Stage-one attention over one patch's sub-patches and the pooled feature.
pub fn fa_forward<R: Rng + ?Sized>(
    params: &HafedParams,
    u_i: ArrayView2<'_, f64>,
    config: &HafedConfig,
    mask_rng: Option<&mut R>,
) -> Result<(Array1<f64>, Array1<f64>)> {
    if u_i.nrows() == 0 {
        return Err(Error::EmptyInstances("patch without sub-patches".into()));
    }
    let scores = params.stage1.scores(u_i)?;
    let col = scores.column(0);
    let mask = match mask_rng {
        Some(rng) => draw_mask(col, config.mask_top_n_stage1, config.mask_prob, rng),
        None => vec![false; col.len()],
    };
    let alpha = Array1::from(masked_softmax(col.as_slice().unwrap_or(&col.to_vec()), &mask)?);
    let v = u_i.t().dot(&alpha);
    Ok((alpha, v))
}

/// Inference-time distillation of one zoomed-in patch.
pub fn distill(params: &HafedParams, u_i: ArrayView2<'_, f64>) -> Result<Array1<f64>> {
    if u_i.ncols() != params.d() {
        return Err(Error::dim("distill input width", params.d(), u_i.ncols()));
    }
    let scores = params.stage1.scores(u_i)?;
    let col: Vec<f64> = scores.column(0).to_vec();
    let alpha = Array1::from(masked_softmax(&col, &vec![false; col.len()])?);
    Ok(u_i.t().dot(&alpha))
}

/// Distills every patch of a bag without masking (`N × d`).
pub fn distill_all(params: &HafedParams, u: ArrayView3<'_, f64>) -> Result<Array2<f64>> {
    Ok(stage1_batch(params, u, None, &HafedConfig::default())?.v)
}

struct Stage1 {
    alpha: Array2<f64>,
    v: Array2<f64>,
    cache: crate::tensor::GatedCache,
}

fn stage1_batch(
    params: &HafedParams,
    u: ArrayView3<'_, f64>,
    mut mask_rng: Option<&mut ChaCha8Rng>,
    config: &HafedConfig,
) -> Result<Stage1> {
    let (n, k, d) = u.dim();
    if k == 0 {
        return Err(Error::EmptyInstances("patch without sub-patches".into()));
    }
    if d != params.d() {
        return Err(Error::dim("high-resolution feature width", params.d(), d));
    }
    let flat = u.to_shape((n * k, d)).map_err(|e| Error::Validation(e.to_string()))?;
    let (scores, cache) = params.stage1.forward(flat.view())?;
    let mut alpha = Array2::zeros((n, k));
    let mut v = Array2::zeros((n, d));
    for i in 0..n {
        let s = scores.slice(ndarray::s![i * k..(i + 1) * k, 0]);
        let mask = match mask_rng.as_deref_mut() {
            Some(rng) => draw_mask(s, config.mask_top_n_stage1, config.mask_prob, rng),
            None => vec![false; k],
        };
        let a = masked_softmax(&s.to_vec(), &mask)?;
        alpha.row_mut(i).assign(&Array1::from(a));
        let pooled = u.index_axis(Axis(0), i).t().dot(&alpha.row(i));
        v.row_mut(i).assign(&pooled);
    }
    Ok(Stage1 { alpha, v, cache })
}

/// Stage-two output for one bag.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierOutput {
    /// `N × M`, each column a distribution over patches.
    pub alpha2: Array2<f64>,
    /// Mean over branches, length `N`.
    pub alpha: Array1<f64>,
    pub h: Array1<f64>,
    /// Per-branch aggregates, `M × d`.
    pub branch_embeddings: Array2<f64>,
    pub branch_logits: Array2<f64>,
    pub final_logits: Array1<f64>,
    /// Probability of class 1.
    pub prob: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HafedOutput {
    pub alpha1: Array2<f64>,
    pub v: Array2<f64>,
    pub classifier: ClassifierOutput,
}

fn softmax2(logits: ArrayView1<'_, f64>) -> [f64; 2] {
    let m = logits[0].max(logits[1]);
    let e0 = (logits[0] - m).exp();
    let e1 = (logits[1] - m).exp();
    [e0 / (e0 + e1), e1 / (e0 + e1)]
}

/// Pools patch features given precomputed stage-two scores (`N × M`).
pub fn classify_with_scores(
    params: &HafedParams,
    v: ArrayView2<'_, f64>,
    scores: ArrayView2<'_, f64>,
    masks: Option<&[Vec<bool>]>,
) -> Result<ClassifierOutput> {
    let (n, m) = scores.dim();
    if n == 0 {
        return Err(Error::EmptyInstances("bag without patches".into()));
    }
    if v.nrows() != n {
        return Err(Error::dim("stage-two scores", v.nrows(), n));
    }
    let mut alpha2 = Array2::zeros((n, m));
    for j in 0..m {
        let col = scores.column(j).to_vec();
        let a = match masks {
            Some(ms) => masked_softmax(&col, &ms[j])?,
            None => masked_softmax(&col, &vec![false; n])?,
        };
        alpha2.column_mut(j).assign(&Array1::from(a));
    }
    let alpha = alpha2.mean_axis(Axis(1)).expect("m >= 1");
    let h = v.t().dot(&alpha);
    let branch_embeddings = alpha2.t().dot(&v);
    let branch_logits = params.head.forward(branch_embeddings.view());
    let final_logits = params
        .head
        .forward(h.view().insert_axis(Axis(0)))
        .index_axis_move(Axis(0), 0);
    let prob = softmax2(final_logits.view())[1];
    Ok(ClassifierOutput {
        alpha2,
        alpha,
        h,
        branch_embeddings,
        branch_logits,
        final_logits,
        prob,
    })
}

/// Stage two over `N` patch features (distilled or mixed-resolution state).
pub fn classifier_forward(
    params: &HafedParams,
    v: ArrayView2<'_, f64>,
    config: &HafedConfig,
    mask_rng: Option<&mut ChaCha8Rng>,
) -> Result<ClassifierOutput> {
    let scores = params.stage2.scores(v)?;
    let masks = mask_rng.map(|rng| stage2_masks(scores.view(), config, rng));
    classify_with_scores(params, v, scores.view(), masks.as_deref())
}

fn stage2_masks(scores: ArrayView2<'_, f64>, config: &HafedConfig, rng: &mut ChaCha8Rng) -> Vec<Vec<bool>> {
    (0..scores.ncols())
        .map(|j| draw_mask(scores.column(j), config.mask_top_n_stage2, config.mask_prob, rng))
        .collect()
}

/// Full-resolution forward pass over a bag's `U`.
pub fn forward(
    params: &HafedParams,
    u: ArrayView3<'_, f64>,
    config: &HafedConfig,
    mut mask_rng: Option<&mut ChaCha8Rng>,
) -> Result<HafedOutput> {
    let s1 = stage1_batch(params, u, mask_rng.as_deref_mut(), config)?;
    let classifier = classifier_forward(params, s1.v.view(), config, mask_rng)?;
    Ok(HafedOutput {
        alpha1: s1.alpha,
        v: s1.v,
        classifier,
    })
}

pub fn predict(params: &HafedParams, bag: &FeatureBag) -> Result<ClassifierOutput> {
    Ok(forward(params, bag.u.view(), &HafedConfig::default(), None)?.classifier)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HafedLoss {
    pub total: f64,
    pub final_ce: f64,
    pub branch_ce: f64,
    pub diversity: f64,
}

fn cross_entropy(logits: ArrayView1<'_, f64>, y: u8) -> f64 {
    let m = logits[0].max(logits[1]);
    let lse = m + ((logits[0] - m).exp() + (logits[1] - m).exp()).ln();
    lse - logits[y as usize]
}

fn cosine(a: ArrayView1<'_, f64>, b: ArrayView1<'_, f64>) -> f64 {
    let na = a.dot(&a).sqrt();
    let nb = b.dot(&b).sqrt();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    a.dot(&b) / (na * nb)
}

/// Mean pairwise cosine similarity between branch attention columns.
pub fn branch_diversity(alpha2: ArrayView2<'_, f64>) -> f64 {
    let m = alpha2.ncols();
    if m < 2 {
        return 0.0;
    }
    let mut total = 0.0;
    let mut pairs = 0usize;
    for j in 0..m {
        for l in j + 1..m {
            total += cosine(alpha2.column(j), alpha2.column(l));
            pairs += 1;
        }
    }
    total / pairs as f64
}

pub fn hafed_loss(output: &ClassifierOutput, y: u8, config: &HafedConfig) -> HafedLoss {
    let final_ce = cross_entropy(output.final_logits.view(), y);
    let m = output.branch_logits.nrows();
    let branch_ce = output
        .branch_logits
        .rows()
        .into_iter()
        .map(|r| cross_entropy(r, y))
        .sum::<f64>()
        / m as f64;
    let diversity = branch_diversity(output.alpha2.view());
    HafedLoss {
        total: config.w_final * final_ce + config.w_branch * branch_ce + config.w_div * diversity,
        final_ce,
        branch_ce,
        diversity,
    }
}

/// Loss and gradient for one bag. `mask_seed` enables training-mode masking
/// with a reproducible draw.
pub fn loss_and_grad(
    params: &HafedParams,
    bag: &FeatureBag,
    config: &HafedConfig,
    mask_seed: Option<u64>,
) -> Result<(HafedLoss, HafedParams)> {
    let mut rng = mask_seed.map(ChaCha8Rng::seed_from_u64);
    let u = bag.u.view();
    let (n, k, d) = u.dim();
    let y = bag.label;
    let s1 = stage1_batch(params, u, rng.as_mut(), config)?;
    let v = &s1.v;
    let (scores2, cache2) = params.stage2.forward(v.view())?;
    let masks = rng.as_mut().map(|r| stage2_masks(scores2.view(), config, r));
    let out = classify_with_scores(params, v.view(), scores2.view(), masks.as_deref())?;
    let loss = hafed_loss(&out, y, config);
    let m = out.alpha2.ncols();

    let mut grad = params.zeros_like();
    let onehot = |p: [f64; 2]| {
        let mut g = Array1::from(p.to_vec());
        g[y as usize] -= 1.0;
        g
    };
    // head
    let dfinal = onehot(softmax2(out.final_logits.view())) * config.w_final;
    let mut dbranch = Array2::zeros((m, 2));
    for j in 0..m {
        let g = onehot(softmax2(out.branch_logits.row(j))) * (config.w_branch / m as f64);
        dbranch.row_mut(j).assign(&g);
    }
    let dh_all = params.head.backward(
        out.h.view().insert_axis(Axis(0)),
        dfinal.view().insert_axis(Axis(0)),
        &mut grad.head,
        true,
    );
    let dh = dh_all.expect("requested").index_axis_move(Axis(0), 0);
    let dbranch_emb = params
        .head
        .backward(out.branch_embeddings.view(), dbranch.view(), &mut grad.head, true)
        .expect("requested");

    // attention weights
    let dalpha = v.dot(&dh);
    let mut dalpha2 = v.dot(&dbranch_emb.t());
    for j in 0..m {
        let mut col = dalpha2.column_mut(j);
        col += &(&dalpha / m as f64);
    }
    if m >= 2 && config.w_div != 0.0 {
        let pairs = (m * (m - 1) / 2) as f64;
        let scale = config.w_div / pairs;
        let norms: Vec<f64> = (0..m).map(|j| out.alpha2.column(j).dot(&out.alpha2.column(j)).sqrt()).collect();
        for j in 0..m {
            for l in 0..m {
                if l == j || norms[j] == 0.0 || norms[l] == 0.0 {
                    continue;
                }
                let aj = out.alpha2.column(j);
                let al = out.alpha2.column(l);
                let cos = aj.dot(&al) / (norms[j] * norms[l]);
                let g = &al / (norms[j] * norms[l]) - &aj * (cos / (norms[j] * norms[j]));
                let mut col = dalpha2.column_mut(j);
                col.scaled_add(scale, &g);
            }
        }
    }

    // features
    let mut dv = ndarray::Array2::<f64>::zeros((n, d));
    for i in 0..n {
        let mut row = dv.row_mut(i);
        row.scaled_add(out.alpha[i], &dh);
        for j in 0..m {
            row.scaled_add(out.alpha2[[i, j]], &dbranch_emb.row(j));
        }
    }
    let mut dscores2 = Array2::zeros((n, m));
    for j in 0..m {
        let p = out.alpha2.column(j).to_vec();
        let dp = dalpha2.column(j).to_vec();
        dscores2.column_mut(j).assign(&Array1::from(softmax_backward(&p, &dp)));
    }
    let dv_attn = params
        .stage2
        .backward(v.view(), &cache2, dscores2.view(), &mut grad.stage2, true)
        .expect("requested");
    dv += &dv_attn;

    // stage one
    let mut dscores1 = Array2::zeros((n * k, 1));
    for i in 0..n {
        let ui = u.index_axis(Axis(0), i);
        let dalpha1 = ui.dot(&dv.row(i));
        let p = s1.alpha.row(i).to_vec();
        let ds = softmax_backward(&p, &dalpha1.to_vec());
        for (s, g) in ds.into_iter().enumerate() {
            dscores1[[i * k + s, 0]] = g;
        }
    }
    let flat = u.to_shape((n * k, d)).map_err(|e| Error::Validation(e.to_string()))?;
    params
        .stage1
        .backward(flat.view(), &s1.cache, dscores1.view(), &mut grad.stage1, false);
    Ok((loss, grad))
}

/// The per-bag HAFED objective, optionally with a fixed masking draw.
pub struct HafedObjective<'a> {
    pub bag: &'a FeatureBag,
    pub config: &'a HafedConfig,
    pub mask_seed: Option<u64>,
}

impl Objective for HafedObjective<'_> {
    type Params = HafedParams;

    fn loss(&self, params: &HafedParams) -> Result<f64> {
        Ok(loss_and_grad(params, self.bag, self.config, self.mask_seed)?.0.total)
    }

    fn loss_and_grad(&self, params: &HafedParams) -> Result<(f64, HafedParams)> {
        let (l, g) = loss_and_grad(params, self.bag, self.config, self.mask_seed)?;
        Ok((l.total, g))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HafedTraining {
    pub epochs: usize,
    pub seed: u64,
    /// Independent initialisations tried before committing to one.
    pub restarts: usize,
    pub restart_epochs: usize,
    pub optimizer: OptimizerConfig,
}

impl Default for HafedTraining {
    fn default() -> Self {
        HafedTraining {
            epochs: 20,
            seed: 0,
            restarts: 1,
            restart_epochs: 2,
            optimizer: OptimizerConfig {
                algorithm: crate::tensor::Algorithm::Adamw,
                lr0: 4e-4,
                weight_decay: 1e-4,
                schedule: Schedule::Cosine,
                ..Default::default()
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainedHafed {
    pub params: HafedParams,
    pub best_epoch: usize,
    pub best_val_loss: f64,
    /// (mean training loss, validation loss) per epoch.
    pub history: Vec<(f64, f64)>,
}

/// Mean unmasked loss over a set of bags.
pub fn evaluate_loss(params: &HafedParams, bags: &[FeatureBag], config: &HafedConfig) -> Result<f64> {
    let mut total = 0.0;
    for bag in bags {
        let out = forward(params, bag.u.view(), config, None)?;
        total += hafed_loss(&out.classifier, bag.label, config).total;
    }
    Ok(total / bags.len().max(1) as f64)
}

struct Run<'a> {
    train: &'a [FeatureBag],
    val: &'a [FeatureBag],
    config: &'a HafedConfig,
    params: HafedParams,
    opt: Optimizer,
    rng: ChaCha8Rng,
    order: Vec<usize>,
    step: usize,
    history: Vec<(f64, f64)>,
    best: (HafedParams, usize, f64),
}

impl<'a> Run<'a> {
    fn new(
        train: &'a [FeatureBag],
        val: &'a [FeatureBag],
        config: &'a HafedConfig,
        training: &HafedTraining,
        seed: u64,
    ) -> Result<Self> {
        let params = HafedParams::new(config, seed)?;
        let mut opt_cfg = training.optimizer.clone();
        if opt_cfg.total_steps == 0 {
            opt_cfg.total_steps = training.epochs * train.len();
        }
        let opt = Optimizer::new(opt_cfg, params.num_params())?;
        let best = (params.clone(), 0usize, evaluate_loss(&params, val, config)?);
        Ok(Run {
            train,
            val,
            config,
            params,
            opt,
            rng: ChaCha8Rng::seed_from_u64(seed ^ 0x4afe_d000),
            order: (0..train.len()).collect(),
            step: 0,
            history: Vec::new(),
            best,
        })
    }

    fn epoch(&mut self) -> Result<f64> {
        let epoch = self.history.len();
        self.order.shuffle(&mut self.rng);
        let mut epoch_loss = 0.0;
        for &i in &self.order {
            let mask_seed = self.rng.gen::<u64>();
            let (loss, grad) = loss_and_grad(&self.params, &self.train[i], self.config, Some(mask_seed))?;
            if !loss.total.is_finite() {
                return Err(Error::Training {
                    step: self.step,
                    reason: "non-finite HAFED loss".into(),
                });
            }
            self.opt.step(&mut self.params, &grad).map_err(|e| Error::Training {
                step: self.step,
                reason: e.to_string(),
            })?;
            epoch_loss += loss.total;
            self.step += 1;
        }
        let train_loss = epoch_loss / self.train.len() as f64;
        let val_loss = evaluate_loss(&self.params, self.val, self.config)?;
        log::info!("hafed epoch {epoch}: train loss {train_loss:.4}, val loss {val_loss:.4}");
        self.history.push((train_loss, val_loss));
        if val_loss < self.best.2 {
            self.best = (self.params.clone(), epoch + 1, val_loss);
        }
        Ok(val_loss)
    }
}

/// Trains both stages jointly on full high-resolution bags, one bag per
/// step, keeping the parameters with the lowest validation loss. With
/// several restarts, each initialisation is trained for `restart_epochs`
/// and only the one with the lowest validation loss is continued.
pub fn train_hafed(
    train: &[FeatureBag],
    val: &[FeatureBag],
    config: &HafedConfig,
    training: &HafedTraining,
) -> Result<TrainedHafed> {
    if train.is_empty() || val.is_empty() {
        return Err(Error::config("splits", "training and validation sets must be nonempty"));
    }
    config.validate()?;
    if training.restarts == 0 {
        return Err(Error::config("restarts", "must be at least 1"));
    }
    let mut run = Run::new(train, val, config, training, training.seed)?;
    if training.restarts > 1 {
        let probe = training.restart_epochs.min(training.epochs);
        let mut chosen: Option<(Run<'_>, f64)> = None;
        for r in 0..training.restarts {
            let seed = if r == 0 { training.seed } else { derive_seed(training.seed, &format!("hafed/restart/{r}")) };
            let mut candidate = Run::new(train, val, config, training, seed)?;
            let mut val_loss = candidate.best.2;
            for _ in 0..probe {
                val_loss = candidate.epoch()?;
            }
            log::info!("hafed restart {r}: val loss {val_loss:.4} after {probe} epochs");
            if chosen.as_ref().map_or(true, |(_, v)| val_loss < *v) {
                chosen = Some((candidate, val_loss));
            }
        }
        run = chosen.expect("at least one restart").0;
    }
    while run.history.len() < training.epochs {
        run.epoch()?;
    }
    Ok(TrainedHafed {
        params: run.best.0,
        best_epoch: run.best.1,
        best_val_loss: run.best.2,
        history: run.history,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{generate_slide, SyntheticConfig};
    use crate::tensor::check_gradient;
    use approx::assert_abs_diff_eq;
    use ndarray::{array, Array3};

    fn tiny_config(m: usize) -> HafedConfig {
        HafedConfig {
            d: 4,
            k: 3,
            hidden: 5,
            branches: m,
            mask_top_n_stage1: 1,
            mask_top_n_stage2: 2,
            ..Default::default()
        }
    }

    fn tiny_bag(seed: u64, label: u8) -> FeatureBag {
        let cfg = SyntheticConfig {
            n_min: 5,
            n_max: 6,
            k: 3,
            d: 4,
            tumor_subpatch_min: 1,
            tumor_subpatch_max: 2,
            tumor_fraction_min: 0.3,
            tumor_fraction_max: 0.5,
            ..Default::default()
        };
        generate_slide(&cfg, label, seed).unwrap()
    }

    #[test]
    fn singleton_subpatch_passes_through() {
        let cfg = tiny_config(2);
        let p = HafedParams::new(&cfg, 1).unwrap();
        let u = array![[0.5, -1.0, 2.0, 0.25]];
        let (a, v) = fa_forward::<ChaCha8Rng>(&p, u.view(), &cfg, None).unwrap();
        assert_eq!(a.to_vec(), vec![1.0]);
        assert_eq!(v, u.row(0));
    }

    #[test]
    fn identical_subpatches_get_uniform_attention() {
        let cfg = tiny_config(2);
        let p = HafedParams::new(&cfg, 2).unwrap();
        let u = Array2::from_shape_fn((3, 4), |(_, j)| j as f64 - 1.5);
        let (a, v) = fa_forward::<ChaCha8Rng>(&p, u.view(), &cfg, None).unwrap();
        for x in a.iter() {
            assert_abs_diff_eq!(*x, 1.0 / 3.0, epsilon = 1e-12);
        }
        for j in 0..4 {
            assert_abs_diff_eq!(v[j], u[[0, j]], epsilon = 1e-12);
        }
    }

    #[test]
    fn empty_patch_is_rejected() {
        let cfg = tiny_config(1);
        let p = HafedParams::new(&cfg, 2).unwrap();
        let u = Array2::<f64>::zeros((0, 4));
        assert!(matches!(
            fa_forward::<ChaCha8Rng>(&p, u.view(), &cfg, None),
            Err(Error::EmptyInstances(_))
        ));
    }

    #[test]
    fn full_width_shapes() {
        let cfg = HafedConfig {
            d: 384,
            k: 16,
            ..Default::default()
        };
        let p = HafedParams::new(&cfg, 0).unwrap();
        let u = Array3::from_shape_fn((800, 16, 384), |(i, s, j)| ((i * 7 + s * 3 + j) % 11) as f64 * 0.01);
        let out = forward(&p, u.view(), &cfg, None).unwrap();
        assert_eq!(out.v.dim(), (800, 384));
        assert_eq!(out.alpha1.dim(), (800, 16));
        assert_eq!(out.classifier.alpha2.dim(), (800, 5));
        assert_eq!(out.classifier.branch_logits.dim(), (5, 2));
    }

    #[test]
    fn single_patch_bag_embeds_that_patch() {
        let cfg = tiny_config(3);
        let p = HafedParams::new(&cfg, 4).unwrap();
        let v = array![[0.1, 0.2, -0.3, 0.4]];
        let out = classifier_forward(&p, v.view(), &cfg, None).unwrap();
        assert_eq!(out.alpha.to_vec(), vec![1.0]);
        assert_eq!(out.h, v.row(0));
    }

    #[test]
    fn classifier_is_permutation_invariant() {
        let cfg = tiny_config(3);
        let p = HafedParams::new(&cfg, 5).unwrap();
        let bag = tiny_bag(3, 1);
        let v = distill_all(&p, bag.u.view()).unwrap();
        let n = v.nrows();
        let perm: Vec<usize> = (0..n).rev().collect();
        let vp = v.select(Axis(0), &perm);
        let a = classifier_forward(&p, v.view(), &cfg, None).unwrap();
        let b = classifier_forward(&p, vp.view(), &cfg, None).unwrap();
        for (i, &pi) in perm.iter().enumerate() {
            assert_abs_diff_eq!(b.alpha[i], a.alpha[pi], epsilon = 1e-12);
        }
        assert_abs_diff_eq!(a.prob, b.prob, epsilon = 1e-12);
        for j in 0..4 {
            assert_abs_diff_eq!(a.h[j], b.h[j], epsilon = 1e-12);
        }
    }

    #[test]
    fn single_branch_has_no_diversity_term() {
        let cfg = tiny_config(1);
        let p = HafedParams::new(&cfg, 6).unwrap();
        let bag = tiny_bag(4, 0);
        let out = forward(&p, bag.u.view(), &cfg, None).unwrap();
        let l = hafed_loss(&out.classifier, 0, &cfg);
        assert_eq!(l.diversity, 0.0);
        assert_abs_diff_eq!(l.total, l.final_ce + l.branch_ce, epsilon = 1e-15);
    }

    #[test]
    fn confident_orthogonal_prediction_approaches_zero_loss() {
        let out = ClassifierOutput {
            alpha2: array![[1.0, 0.0], [0.0, 1.0]],
            alpha: array![0.5, 0.5],
            h: array![0.0],
            branch_embeddings: array![[0.0], [0.0]],
            branch_logits: array![[-40.0, 40.0], [-40.0, 40.0]],
            final_logits: array![-40.0, 40.0],
            prob: 1.0,
        };
        let l = hafed_loss(&out, 1, &HafedConfig::default());
        assert!(l.total < 1e-30, "{l:?}");
    }

    #[test]
    fn loss_matches_straight_line_formula() {
        // two branches, three patches, d = 2
        let cfg = HafedConfig {
            d: 2,
            k: 1,
            hidden: 3,
            branches: 2,
            ..Default::default()
        };
        let mut p = HafedParams::new(&cfg, 9).unwrap();
        p.head.weight = array![[0.5, -0.25], [1.0, 0.75]];
        p.head.bias = array![0.1, -0.2];
        let v = array![[1.0, 2.0], [-1.0, 0.5], [0.25, -0.75]];
        let out = classifier_forward(&p, v.view(), &cfg, None).unwrap();
        let l = hafed_loss(&out, 1, &cfg);

        let s = p.stage2.scores(v.view()).unwrap();
        let col_softmax = |j: usize| {
            let e: Vec<f64> = (0..3).map(|i| s[[i, j]].exp()).collect();
            let z: f64 = e.iter().sum();
            e.into_iter().map(|x| x / z).collect::<Vec<_>>()
        };
        let a0 = col_softmax(0);
        let a1 = col_softmax(1);
        let pool = |w: &[f64]| {
            [
                w[0] * 1.0 + w[1] * -1.0 + w[2] * 0.25,
                w[0] * 2.0 + w[1] * 0.5 + w[2] * -0.75,
            ]
        };
        let logits = |h: [f64; 2]| {
            [
                h[0] * 0.5 + h[1] * 1.0 + 0.1,
                h[0] * -0.25 + h[1] * 0.75 - 0.2,
            ]
        };
        let ce1 = |l: [f64; 2]| -(l[1].exp() / (l[0].exp() + l[1].exp())).ln();
        let mean: Vec<f64> = (0..3).map(|i| 0.5 * (a0[i] + a1[i])).collect();
        let final_ce = ce1(logits(pool(&mean)));
        let branch_ce = 0.5 * (ce1(logits(pool(&a0))) + ce1(logits(pool(&a1))));
        let dot: f64 = (0..3).map(|i| a0[i] * a1[i]).sum();
        let n0: f64 = a0.iter().map(|x| x * x).sum::<f64>().sqrt();
        let n1: f64 = a1.iter().map(|x| x * x).sum::<f64>().sqrt();
        let expected = final_ce + branch_ce + dot / (n0 * n1);
        assert_abs_diff_eq!(l.total, expected, epsilon = 1e-9);
    }

    #[test]
    fn gradients_match_finite_differences() {
        for (seed, m, label) in [(1u64, 1usize, 1u8), (2, 3, 0), (3, 2, 1)] {
            let cfg = tiny_config(m);
            let p = HafedParams::new(&cfg, seed).unwrap();
            let bag = tiny_bag(seed + 10, label);
            let obj = HafedObjective {
                bag: &bag,
                config: &cfg,
                mask_seed: None,
            };
            let check = check_gradient(&obj, &p, 1e-5, 1e-6).unwrap();
            assert!(check.max_relative_error < 1e-4, "{check:?}");
        }
    }

    #[test]
    fn masked_gradients_match_finite_differences() {
        let cfg = HafedConfig {
            mask_prob: 1.0,
            ..tiny_config(2)
        };
        let p = HafedParams::new(&cfg, 21).unwrap();
        let bag = tiny_bag(22, 1);
        let obj = HafedObjective {
            bag: &bag,
            config: &cfg,
            mask_seed: Some(5),
        };
        let check = check_gradient(&obj, &p, 1e-5, 1e-6).unwrap();
        assert!(check.max_relative_error < 1e-4, "{check:?}");
    }

    #[test]
    fn masking_keeps_relative_order_of_survivors() {
        let scores = array![0.3, 2.0, -1.0, 1.5, 0.9];
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mask = draw_mask(scores.view(), 2, 1.0, &mut rng);
        assert_eq!(mask, vec![false, true, false, true, false]);
        let p = masked_softmax(&scores.to_vec(), &mask).unwrap();
        assert!(p[4] > p[0] && p[0] > p[2]);
    }

    #[test]
    fn distill_matches_unmasked_stage_one() {
        let cfg = tiny_config(2);
        let p = HafedParams::new(&cfg, 8).unwrap();
        let bag = tiny_bag(8, 1);
        let all = distill_all(&p, bag.u.view()).unwrap();
        for i in 0..bag.num_patches() {
            let one = distill(&p, bag.sub_patches(i)).unwrap();
            let (_, fa) = fa_forward::<ChaCha8Rng>(&p, bag.sub_patches(i), &cfg, None).unwrap();
            assert_eq!(one, fa);
            for j in 0..4 {
                assert_abs_diff_eq!(one[j], all[[i, j]], epsilon = 1e-12);
            }
            assert_eq!(one, distill(&p, bag.sub_patches(i)).unwrap());
        }
    }

    #[test]
    fn training_reduces_loss_on_one_slide() {
        let cfg = tiny_config(2);
        let bag = tiny_bag(30, 1);
        let training = HafedTraining {
            epochs: 30,
            seed: 3,
            optimizer: OptimizerConfig {
                lr0: 1e-2,
                ..Default::default()
            },
            ..Default::default()
        };
        let before = evaluate_loss(&HafedParams::new(&cfg, 3).unwrap(), std::slice::from_ref(&bag), &cfg).unwrap();
        let trained = train_hafed(std::slice::from_ref(&bag), std::slice::from_ref(&bag), &cfg, &training).unwrap();
        assert!(trained.best_val_loss < before);
        let again = train_hafed(std::slice::from_ref(&bag), std::slice::from_ref(&bag), &cfg, &training).unwrap();
        assert_eq!(again.params, trained.params);
    }

    #[test]
    fn restarts_are_deterministic_and_keep_the_epoch_count() {
        let cfg = tiny_config(2);
        let bags = [tiny_bag(31, 1), tiny_bag(32, 0)];
        let training = HafedTraining {
            epochs: 4,
            seed: 5,
            restarts: 3,
            restart_epochs: 2,
            ..Default::default()
        };
        let a = train_hafed(&bags, &bags, &cfg, &training).unwrap();
        let b = train_hafed(&bags, &bags, &cfg, &training).unwrap();
        assert_eq!(a.params, b.params);
        assert_eq!(a.history.len(), 4);
        let zero = HafedTraining { restarts: 0, ..training };
        assert!(train_hafed(&bags, &bags, &cfg, &zero).is_err());
    }
}

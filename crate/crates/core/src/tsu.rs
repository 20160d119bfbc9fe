//! Targeted state updater.
//!
//! The slide state starts as the low-resolution features `Z`. Visiting a
//! patch replaces its row with the distilled high-resolution feature, and a
//! small network propagates that information to every unvisited row whose
//! cosine similarity to the visited row reaches `τ`.

use ndarray::{concatenate, s, Array1, Array2, ArrayView1, ArrayView2, ArrayViewD, ArrayViewMutD, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datagen::FeatureBag;
use crate::error::{Error, Result};
use crate::hafed::{distill_all, HafedParams};
use crate::tensor::{prefixed, prefixed_mut, Algorithm, LayerNorm, Linear, Optimizer, OptimizerConfig, ParamSet};

/// Which unvisited rows receive a learned update after a visit.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum UpdateRule {
    /// Rows with cosine similarity at least `tau` to the visited row.
    Targeted { tau: f64 },
    /// Every unvisited row.
    Global,
    /// No propagation; only the visited row changes.
    Local,
}

impl UpdateRule {
    pub fn validate(&self) -> Result<()> {
        if let UpdateRule::Targeted { tau } = self {
            if !(*tau > -1.0 && *tau <= 1.0) {
                return Err(Error::config("tau", format!("{tau} outside (-1, 1]")));
            }
        }
        Ok(())
    }

    pub fn name(&self) -> &'static str {
        match self {
            UpdateRule::Targeted { .. } => "targeted",
            UpdateRule::Global => "global",
            UpdateRule::Local => "local",
        }
    }
}

fn cosine(a: ArrayView1<'_, f64>, b: ArrayView1<'_, f64>) -> Option<f64> {
    let na = a.dot(&a).sqrt();
    let nb = b.dot(&b).sqrt();
    if na == 0.0 || nb == 0.0 {
        return None;
    }
    Some(a.dot(&b) / (na * nb))
}

/// Unvisited rows (other than `a`) whose cosine similarity to row `a` is at
/// least `tau`. Zero-norm rows are never similar to anything.
pub fn similar_set(s: ArrayView2<'_, f64>, a: usize, tau: f64, visited: &[bool]) -> Result<Vec<usize>> {
    let n = s.nrows();
    if a >= n {
        return Err(Error::Validation(format!("action {a} outside 0..{n}")));
    }
    if visited.len() != n {
        return Err(Error::dim("visited mask", n, visited.len()));
    }
    let target = s.row(a);
    let mut out = Vec::new();
    for i in 0..n {
        if i == a || visited[i] {
            continue;
        }
        match cosine(s.row(i), target) {
            Some(c) if c >= tau => out.push(i),
            Some(_) => {}
            None => log::debug!("row {i} or {a} has zero norm; excluded from similarity"),
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TsuParams {
    pub fc1: Linear,
    pub fc2: Linear,
    pub norm: LayerNorm,
}

impl TsuParams {
    pub fn new(d: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        TsuParams {
            fc1: Linear::new(&mut rng, 3 * d, 2 * d),
            fc2: Linear::new(&mut rng, 2 * d, d),
            norm: LayerNorm::new(d),
        }
    }

    pub fn d(&self) -> usize {
        self.fc2.out_dim()
    }
}

impl ParamSet for TsuParams {
    fn visit(&self, f: &mut dyn FnMut(&str, ArrayViewD<'_, f64>)) {
        self.fc1.visit(&mut prefixed("fc1", f));
        self.fc2.visit(&mut prefixed("fc2", f));
        self.norm.visit(&mut prefixed("norm", f));
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, ArrayViewMutD<'_, f64>)) {
        self.fc1.visit_mut(&mut prefixed_mut("fc1", f));
        self.fc2.visit_mut(&mut prefixed_mut("fc2", f));
        self.norm.visit_mut(&mut prefixed_mut("norm", f));
    }
}

struct TsuCache {
    pre1: Array2<f64>,
    act1: Array2<f64>,
    normed: Array2<f64>,
    inv_std: Array1<f64>,
}

/// Batched forward over rows of `[s_i, s_a, v_a]` (`B × 3d`).
fn forward_batch(params: &TsuParams, x: ArrayView2<'_, f64>) -> Result<(Array2<f64>, TsuCache)> {
    if x.ncols() != params.fc1.in_dim() {
        return Err(Error::dim("updater input width", params.fc1.in_dim(), x.ncols()));
    }
    let pre1 = params.fc1.forward(x);
    let act1 = pre1.mapv(|v| v.max(0.0));
    let pre2 = params.fc2.forward(act1.view());
    let (out, normed, inv_std) = params.norm.forward(pre2.view());
    Ok((
        out,
        TsuCache {
            pre1,
            act1,
            normed,
            inv_std,
        },
    ))
}

fn backward_batch(
    params: &TsuParams,
    x: ArrayView2<'_, f64>,
    cache: &TsuCache,
    dout: ArrayView2<'_, f64>,
    grad: &mut TsuParams,
) {
    let dpre2 = params.norm.backward(&cache.normed, &cache.inv_std, dout, &mut grad.norm);
    let dact1 = params
        .fc2
        .backward(cache.act1.view(), dpre2.view(), &mut grad.fc2, true)
        .expect("requested");
    let dpre1 = &dact1 * &cache.pre1.mapv(|v| if v > 0.0 { 1.0 } else { 0.0 });
    params.fc1.backward(x, dpre1.view(), &mut grad.fc1, false);
}

pub fn tsu_forward(
    params: &TsuParams,
    s_i: ArrayView1<'_, f64>,
    s_a: ArrayView1<'_, f64>,
    v_a: ArrayView1<'_, f64>,
) -> Result<Array1<f64>> {
    let d = params.d();
    for (name, len) in [("s_i", s_i.len()), ("s_a", s_a.len()), ("v_a", v_a.len())] {
        if len != d {
            return Err(Error::dim(name, d, len));
        }
    }
    let mut x = Array1::zeros(3 * d);
    x.slice_mut(s![..d]).assign(&s_i);
    x.slice_mut(s![d..2 * d]).assign(&s_a);
    x.slice_mut(s![2 * d..]).assign(&v_a);
    let (out, _) = forward_batch(params, x.view().insert_axis(Axis(0)))?;
    Ok(out.index_axis_move(Axis(0), 0))
}

fn stack_inputs(s: ArrayView2<'_, f64>, rows: &[usize], a: usize, v_a: ArrayView1<'_, f64>) -> Array2<f64> {
    let d = s.ncols();
    let mut x = Array2::zeros((rows.len(), 3 * d));
    for (r, &i) in rows.iter().enumerate() {
        x.slice_mut(s![r, ..d]).assign(&s.row(i));
        x.slice_mut(s![r, d..2 * d]).assign(&s.row(a));
        x.slice_mut(s![r, 2 * d..]).assign(&v_a);
    }
    x
}

/// Mixed-resolution state of one slide during an episode.
#[derive(Debug, Clone, PartialEq)]
pub struct SlideState {
    pub s: Array2<f64>,
    visited: Vec<bool>,
    order: Vec<usize>,
    budget: usize,
}

impl SlideState {
    pub fn new(z: ArrayView2<'_, f64>, budget: usize) -> Result<Self> {
        let n = z.nrows();
        if budget > n {
            return Err(Error::State(format!("budget {budget} exceeds {n} patches")));
        }
        if z.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("initial state".into()));
        }
        Ok(SlideState {
            s: z.to_owned(),
            visited: vec![false; n],
            order: Vec::with_capacity(budget),
            budget,
        })
    }

    pub fn t(&self) -> usize {
        self.order.len()
    }

    pub fn budget(&self) -> usize {
        self.budget
    }

    pub fn num_patches(&self) -> usize {
        self.s.nrows()
    }

    pub fn visited(&self) -> &[bool] {
        &self.visited
    }

    /// Visited indices in visiting order.
    pub fn order(&self) -> &[usize] {
        &self.order
    }

    pub fn is_done(&self) -> bool {
        self.order.len() >= self.budget
    }

    /// Rows that would be propagated to if `a` were visited now.
    pub fn targets(&self, a: usize, rule: UpdateRule) -> Result<Vec<usize>> {
        match rule {
            UpdateRule::Targeted { tau } => similar_set(self.s.view(), a, tau, &self.visited),
            UpdateRule::Global => Ok((0..self.num_patches())
                .filter(|&i| i != a && !self.visited[i])
                .collect()),
            UpdateRule::Local => Ok(Vec::new()),
        }
    }

    /// Visits patch `a` with distilled feature `v_a`. Returns every row index
    /// that changed, the visited row first.
    pub fn apply_update(
        &mut self,
        a: usize,
        v_a: ArrayView1<'_, f64>,
        params: Option<&TsuParams>,
        rule: UpdateRule,
    ) -> Result<Vec<usize>> {
        let n = self.num_patches();
        if a >= n {
            return Err(Error::Validation(format!("action {a} outside 0..{n}")));
        }
        if self.visited[a] {
            return Err(Error::RepeatAction(a));
        }
        if self.is_done() {
            return Err(Error::State(format!("budget {} already spent", self.budget)));
        }
        if v_a.len() != self.s.ncols() {
            return Err(Error::dim("visited feature", self.s.ncols(), v_a.len()));
        }
        let targets = self.targets(a, rule)?;
        let mut changed = Vec::with_capacity(targets.len() + 1);
        changed.push(a);
        if !targets.is_empty() {
            let params = params.ok_or_else(|| Error::Dependency("state updater parameters required".into()))?;
            let x = stack_inputs(self.s.view(), &targets, a, v_a);
            let (out, _) = forward_batch(params, x.view())?;
            for (r, &i) in targets.iter().enumerate() {
                self.s.row_mut(i).assign(&out.row(r));
            }
            changed.extend_from_slice(&targets);
        }
        self.s.row_mut(a).assign(&v_a);
        self.visited[a] = true;
        self.order.push(a);
        Ok(changed)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TsuConfig {
    pub rule: UpdateRule,
    pub epochs: usize,
    pub seed: u64,
    /// Fraction of each slide's patches visited per simulated episode.
    pub visit_fraction: f64,
    /// Exclude propagated-to rows from later random visits.
    pub mask_similar_during_training: bool,
    pub batch_size: usize,
    pub optimizer: OptimizerConfig,
}

impl Default for TsuConfig {
    fn default() -> Self {
        TsuConfig {
            rule: UpdateRule::Targeted { tau: 0.9 },
            epochs: 30,
            seed: 0,
            visit_fraction: 0.2,
            mask_similar_during_training: true,
            batch_size: 64,
            optimizer: OptimizerConfig {
                algorithm: Algorithm::Adam,
                lr0: 1e-3,
                ..Default::default()
            },
        }
    }
}

impl TsuConfig {
    pub fn validate(&self) -> Result<()> {
        self.rule.validate()?;
        if self.rule == UpdateRule::Local {
            return Err(Error::config("rule", "the local rule has nothing to train"));
        }
        if !(self.visit_fraction > 0.0 && self.visit_fraction <= 1.0) {
            return Err(Error::config("visit_fraction", "must lie in (0, 1]"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", "must be positive"));
        }
        self.optimizer.validate()
    }
}

/// Supervision for the updater: inputs `[s_i, s_a, v_a]` and targets `V_i`.
#[derive(Debug, Clone, PartialEq)]
pub struct PairSet {
    pub inputs: Array2<f64>,
    pub targets: Array2<f64>,
}

impl PairSet {
    pub fn len(&self) -> usize {
        self.inputs.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Error of predicting each `s_i` unchanged.
    pub fn identity_mse(&self) -> f64 {
        if self.is_empty() {
            return f64::NAN;
        }
        let d = self.targets.ncols();
        let diff = &self.inputs.slice(s![.., ..d]) - &self.targets;
        diff.mapv(|v| v * v).mean().unwrap_or(f64::NAN)
    }

    pub fn mse(&self, params: &TsuParams) -> Result<f64> {
        if self.is_empty() {
            return Ok(f64::NAN);
        }
        let (out, _) = forward_batch(params, self.inputs.view())?;
        Ok((&out - &self.targets).mapv(|v| v * v).mean().unwrap_or(f64::NAN))
    }
}

/// Simulates one random-visit episode and records a training pair for every
/// propagated-to row. Rows are updated with the current parameters as the
/// episode proceeds, so later pairs see mixed states.
pub fn collect_pairs<R: Rng>(
    bag: &FeatureBag,
    v: ArrayView2<'_, f64>,
    params: &TsuParams,
    config: &TsuConfig,
    rng: &mut R,
) -> Result<PairSet> {
    let n = bag.num_patches();
    let visits = ((config.visit_fraction * n as f64).ceil() as usize).clamp(1, n);
    let mut state = SlideState::new(bag.z.view(), visits)?;
    let mut propagated = vec![false; n];
    let mut inputs = Vec::new();
    let mut targets = Vec::new();
    while !state.is_done() {
        let candidates: Vec<usize> = (0..n)
            .filter(|&i| !state.visited()[i] && !(config.mask_similar_during_training && propagated[i]))
            .collect();
        let Some(&a) = candidates.choose(rng) else { break };
        let rows = state.targets(a, config.rule)?;
        if !rows.is_empty() {
            let x = stack_inputs(state.s.view(), &rows, a, v.row(a));
            inputs.push(x);
            targets.push(v.select(Axis(0), &rows));
        }
        for &i in &rows {
            propagated[i] = true;
        }
        state.apply_update(a, v.row(a), Some(params), config.rule)?;
    }
    let d = v.ncols();
    let stack = |parts: Vec<Array2<f64>>, w: usize| -> Array2<f64> {
        if parts.is_empty() {
            return Array2::zeros((0, w));
        }
        let views: Vec<_> = parts.iter().map(|p| p.view()).collect();
        concatenate(Axis(0), &views).expect("same width")
    };
    Ok(PairSet {
        inputs: stack(inputs, 3 * d),
        targets: stack(targets, d),
    })
}

fn merge(sets: Vec<PairSet>, d: usize) -> PairSet {
    let inputs: Vec<_> = sets.iter().map(|p| p.inputs.view()).collect();
    let targets: Vec<_> = sets.iter().map(|p| p.targets.view()).collect();
    if inputs.is_empty() {
        return PairSet {
            inputs: Array2::zeros((0, 3 * d)),
            targets: Array2::zeros((0, d)),
        };
    }
    PairSet {
        inputs: concatenate(Axis(0), &inputs).expect("same width"),
        targets: concatenate(Axis(0), &targets).expect("same width"),
    }
}

/// Mean squared error over a batch and its gradient.
pub fn mse_loss_and_grad(params: &TsuParams, pairs: &PairSet) -> Result<(f64, TsuParams)> {
    let (out, cache) = forward_batch(params, pairs.inputs.view())?;
    let diff = &out - &pairs.targets;
    let count = diff.len().max(1) as f64;
    let loss = diff.mapv(|v| v * v).sum() / count;
    let dout = diff * (2.0 / count);
    let mut grad = params.zeros_like();
    backward_batch(params, pairs.inputs.view(), &cache, dout.view(), &mut grad);
    Ok((loss, grad))
}

/// Supervision restricted to tumour targets: for every tumour patch `a` of
/// a fresh state, the other tumour patches similar to it.
pub fn tumor_pairs(bags: &[FeatureBag], distilled: &[Array2<f64>], tau: f64) -> Result<PairSet> {
    let mut sets = Vec::new();
    let d = distilled.first().map_or(0, |v| v.ncols());
    for (bag, v) in bags.iter().zip(distilled) {
        let visited = vec![false; bag.num_patches()];
        for a in (0..bag.num_patches()).filter(|&a| bag.tumor_mask[a]) {
            let rows: Vec<usize> = similar_set(bag.z.view(), a, tau, &visited)?
                .into_iter()
                .filter(|&i| bag.tumor_mask[i])
                .collect();
            if rows.is_empty() {
                continue;
            }
            sets.push(PairSet {
                inputs: stack_inputs(bag.z.view(), &rows, a, v.row(a)),
                targets: v.select(Axis(0), &rows),
            });
        }
    }
    Ok(merge(sets, d))
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainedTsu {
    pub params: TsuParams,
    pub best_epoch: usize,
    pub best_val_mse: f64,
    /// Identity-baseline error on the same validation pairs.
    pub val_identity_mse: f64,
    /// (training MSE, validation MSE) per epoch.
    pub history: Vec<(f64, f64)>,
}

/// Trains the updater against a frozen distiller.
pub fn train_tsu(
    train: &[FeatureBag],
    val: &[FeatureBag],
    hafed: &HafedParams,
    config: &TsuConfig,
) -> Result<TrainedTsu> {
    config.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::config("splits", "training and validation sets must be nonempty"));
    }
    let d = hafed.d();
    let distill = |bags: &[FeatureBag]| -> Result<Vec<Array2<f64>>> {
        bags.iter().map(|b| distill_all(hafed, b.u.view())).collect()
    };
    let train_v = distill(train)?;
    let val_v = distill(val)?;
    let tau = match config.rule {
        UpdateRule::Targeted { tau } => tau,
        _ => -1.0,
    };

    let mut params = TsuParams::new(d, config.seed);
    let mut opt_cfg = config.optimizer.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x75u64.rotate_left(40));
    // Validation pairs come from fixed visiting orders with the initial
    // parameters so every epoch is scored on the same supervision.
    let val_pairs = {
        let mut vrng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x7661_6c00);
        let sets = val
            .iter()
            .zip(&val_v)
            .map(|(b, v)| collect_pairs(b, v.view(), &params, config, &mut vrng))
            .collect::<Result<Vec<_>>>()?;
        merge(sets, d)
    };
    if val_pairs.is_empty() {
        log::warn!("no similar pairs in validation at tau {tau}");
        return Err(Error::DegenerateThreshold { tau });
    }
    let val_identity_mse = val_pairs.identity_mse();
    let mut optimizer: Option<Optimizer> = None;
    let mut best = (params.clone(), 0usize, val_pairs.mse(&params)?);
    let mut history = Vec::with_capacity(config.epochs);
    let mut step = 0usize;
    for epoch in 0..config.epochs {
        let sets = train
            .iter()
            .zip(&train_v)
            .map(|(b, v)| collect_pairs(b, v.view(), &params, config, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        let pairs = merge(sets, d);
        if pairs.is_empty() {
            log::warn!("no similar pairs in epoch {epoch} at tau {tau}");
            return Err(Error::DegenerateThreshold { tau });
        }
        let opt = match optimizer.as_mut() {
            Some(o) => o,
            None => {
                // The horizon is only known once the first epoch's pairs exist.
                if opt_cfg.total_steps == 0 {
                    opt_cfg.total_steps = config.epochs * pairs.len().div_ceil(config.batch_size);
                }
                optimizer.insert(Optimizer::new(opt_cfg.clone(), params.num_params())?)
            }
        };
        let mut order: Vec<usize> = (0..pairs.len()).collect();
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for chunk in order.chunks(config.batch_size) {
            let batch = PairSet {
                inputs: pairs.inputs.select(Axis(0), chunk),
                targets: pairs.targets.select(Axis(0), chunk),
            };
            let (loss, grad) = mse_loss_and_grad(&params, &batch)?;
            if !loss.is_finite() {
                return Err(Error::Training {
                    step,
                    reason: "non-finite updater loss".into(),
                });
            }
            opt.step(&mut params, &grad).map_err(|e| Error::Training {
                step,
                reason: e.to_string(),
            })?;
            total += loss * chunk.len() as f64;
            step += 1;
        }
        let val_mse = val_pairs.mse(&params)?;
        log::info!(
            "tsu epoch {epoch}: train mse {:.4}, val mse {val_mse:.4} (identity {val_identity_mse:.4})",
            total / pairs.len() as f64
        );
        history.push((total / pairs.len() as f64, val_mse));
        if val_mse < best.2 {
            best = (params.clone(), epoch + 1, val_mse);
        }
    }
    Ok(TrainedTsu {
        params: best.0,
        best_epoch: best.1,
        best_val_mse: best.2,
        val_identity_mse,
        history,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{check_gradient, Objective};
    use approx::assert_abs_diff_eq;
    use ndarray::array;
    use proptest::prelude::{prop_assert_eq, proptest, ProptestConfig};

    fn random_matrix(n: usize, d: usize, seed: u64) -> Array2<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array2::from_shape_fn((n, d), |_| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn threshold_one_without_duplicates_is_empty() {
        let s = random_matrix(8, 4, 1);
        for a in 0..8 {
            assert!(similar_set(s.view(), a, 1.0, &[false; 8]).unwrap().is_empty());
        }
    }

    #[test]
    fn duplicate_row_is_similar() {
        let mut s = random_matrix(8, 4, 2);
        let row = s.row(3).to_owned();
        s.row_mut(6).assign(&row);
        let c = similar_set(s.view(), 3, 0.9, &[false; 8]).unwrap();
        assert!(c.contains(&6));
        let mut visited = [false; 8];
        visited[6] = true;
        assert!(!similar_set(s.view(), 3, 0.9, &visited).unwrap().contains(&6));
    }

    #[test]
    fn zero_rows_are_excluded() {
        let mut s = random_matrix(5, 3, 3);
        s.row_mut(2).fill(0.0);
        assert!(!similar_set(s.view(), 0, -1.0, &[false; 5]).unwrap().contains(&2));
        assert!(similar_set(s.view(), 2, -1.0, &[false; 5]).unwrap().is_empty());
    }

    fn brute_force_similar(s: &Array2<f64>, a: usize, tau: f64, visited: &[bool]) -> Vec<usize> {
        let unit: Vec<Vec<f64>> = s
            .rows()
            .into_iter()
            .map(|r| {
                let n = r.iter().map(|v| v * v).sum::<f64>().sqrt();
                r.iter().map(|v| v / n).collect()
            })
            .collect();
        (0..s.nrows())
            .filter(|&i| i != a && !visited[i])
            .filter(|&i| unit[i].iter().zip(&unit[a]).map(|(x, y)| x * y).sum::<f64>() >= tau)
            .collect()
    }

    #[test]
    fn similar_set_matches_brute_force() {
        for seed in 0..150u64 {
            let s = random_matrix(8, 4, seed);
            let mut rng = ChaCha8Rng::seed_from_u64(seed + 1000);
            let visited: Vec<bool> = (0..8).map(|_| rng.gen_bool(0.3)).collect();
            let a = rng.gen_range(0..8);
            let tau = rng.gen_range(-0.5..0.9);
            assert_eq!(
                similar_set(s.view(), a, tau, &visited).unwrap(),
                brute_force_similar(&s, a, tau, &visited),
                "seed {seed}"
            );
        }
    }

    #[test]
    fn full_width_shapes_and_normalisation() {
        let p = TsuParams::new(384, 0);
        assert_eq!(p.fc1.weight.dim(), (1152, 768));
        assert_eq!(p.fc2.weight.dim(), (768, 384));
        assert_eq!(p.norm.gain.len(), 384);
        let x = random_matrix(3, 384, 4);
        let out = tsu_forward(&p, x.row(0), x.row(1), x.row(2)).unwrap();
        assert_eq!(out.len(), 384);
        let mean = out.mean().unwrap();
        let var = out.mapv(|v| (v - mean).powi(2)).mean().unwrap();
        assert_abs_diff_eq!(mean, 0.0, epsilon = 1e-10);
        assert_abs_diff_eq!(var, 1.0, epsilon = 1e-3);
    }

    #[test]
    fn three_unit_network_matches_formula() {
        let mut p = TsuParams::new(1, 0);
        p.fc1.weight = array![[0.5, -1.0], [0.25, 0.75], [-0.5, 2.0]];
        p.fc1.bias = array![0.1, -0.2];
        p.fc2.weight = array![[1.5], [-0.5]];
        p.fc2.bias = array![0.3];
        p.norm.gain = array![2.0];
        let (si, sa, va) = (0.8, -0.4, 1.2);
        let out = tsu_forward(&p, array![si].view(), array![sa].view(), array![va].view()).unwrap();
        // a single feature normalises to zero regardless of input
        assert_eq!(out[0], 0.0);

        let mut p = TsuParams::new(2, 0);
        p.fc1.weight = Array2::from_shape_fn((6, 4), |(i, j)| ((i * 4 + j) as f64 * 0.37).sin());
        p.fc1.bias = array![0.1, -0.1, 0.05, 0.0];
        p.fc2.weight = Array2::from_shape_fn((4, 2), |(i, j)| ((i * 2 + j) as f64 * 0.91).cos());
        p.fc2.bias = array![0.2, -0.3];
        p.norm.gain = array![1.5, 0.5];
        let x = [0.3, -0.7, 0.2, 0.9, -0.4, 0.6];
        let mut h = [0.0; 4];
        for (j, hj) in h.iter_mut().enumerate() {
            let mut acc = p.fc1.bias[j];
            for (i, xi) in x.iter().enumerate() {
                acc += xi * p.fc1.weight[[i, j]];
            }
            *hj = acc.max(0.0);
        }
        let mut y = [0.0; 2];
        for (k, yk) in y.iter_mut().enumerate() {
            *yk = p.fc2.bias[k] + (0..4).map(|j| h[j] * p.fc2.weight[[j, k]]).sum::<f64>();
        }
        let mean = (y[0] + y[1]) / 2.0;
        let var = ((y[0] - mean).powi(2) + (y[1] - mean).powi(2)) / 2.0;
        let expected: Vec<f64> = (0..2).map(|k| p.norm.gain[k] * (y[k] - mean) / (var + 1e-5).sqrt()).collect();
        let out = tsu_forward(&p, array![x[0], x[1]].view(), array![x[2], x[3]].view(), array![x[4], x[5]].view()).unwrap();
        for k in 0..2 {
            assert_abs_diff_eq!(out[k], expected[k], epsilon = 1e-12);
        }
    }

    #[test]
    fn wrong_width_is_rejected() {
        let p = TsuParams::new(4, 0);
        let a = Array1::zeros(4);
        let b = Array1::zeros(3);
        assert!(matches!(tsu_forward(&p, a.view(), b.view(), a.view()), Err(Error::Dimension { .. })));
    }

    #[test]
    fn visited_row_is_replaced_exactly() {
        let z = random_matrix(6, 4, 5);
        let p = TsuParams::new(4, 1);
        let mut st = SlideState::new(z.view(), 3).unwrap();
        let v = array![0.123456789, -9.87654321, 1e-17, 42.0];
        st.apply_update(2, v.view(), Some(&p), UpdateRule::Targeted { tau: -0.99 }).unwrap();
        for j in 0..4 {
            assert_eq!(st.s[[2, j]].to_bits(), v[j].to_bits());
        }
        assert!(matches!(
            st.apply_update(2, v.view(), Some(&p), UpdateRule::Local),
            Err(Error::RepeatAction(2))
        ));
        assert_eq!(st.t(), 1);
    }

    #[test]
    fn empty_similar_set_changes_only_visited_row() {
        let z = random_matrix(6, 4, 6);
        let p = TsuParams::new(4, 1);
        let mut st = SlideState::new(z.view(), 6).unwrap();
        let v = array![1.0, 2.0, 3.0, 4.0];
        let changed = st.apply_update(0, v.view(), Some(&p), UpdateRule::Targeted { tau: 1.0 }).unwrap();
        assert_eq!(changed, vec![0]);
        for i in 1..6 {
            assert_eq!(st.s.row(i), z.row(i));
        }
    }

    #[test]
    fn update_uses_pre_update_row() {
        let z = random_matrix(4, 3, 7);
        let p = TsuParams::new(3, 2);
        let mut st = SlideState::new(z.view(), 2).unwrap();
        let v = array![0.5, -0.5, 0.25];
        let changed = st.apply_update(1, v.view(), Some(&p), UpdateRule::Global).unwrap();
        assert_eq!(changed, vec![1, 0, 2, 3]);
        for i in [0, 2, 3] {
            let expected = tsu_forward(&p, z.row(i), z.row(1), v.view()).unwrap();
            assert_eq!(st.s.row(i), expected);
        }
    }

    #[test]
    fn global_rule_without_params_is_a_dependency_error() {
        let z = random_matrix(4, 3, 8);
        let mut st = SlideState::new(z.view(), 2).unwrap();
        let v = array![0.5, -0.5, 0.25];
        assert!(matches!(
            st.apply_update(0, v.view(), None, UpdateRule::Global),
            Err(Error::Dependency(_))
        ));
    }

    #[test]
    fn full_traversal_ends_at_distilled_features() {
        let z = random_matrix(7, 4, 9);
        let v = random_matrix(7, 4, 10);
        let p = TsuParams::new(4, 3);
        let mut st = SlideState::new(z.view(), 7).unwrap();
        for a in [3, 0, 6, 1, 5, 2, 4] {
            st.apply_update(a, v.row(a), Some(&p), UpdateRule::Targeted { tau: 0.0 }).unwrap();
        }
        assert_eq!(st.s, v);
        assert!(st.is_done());
        assert!(matches!(
            st.apply_update(0, v.row(0), Some(&p), UpdateRule::Local),
            Err(Error::RepeatAction(0))
        ));
    }

    struct Mse<'a>(&'a PairSet);

    impl Objective for Mse<'_> {
        type Params = TsuParams;
        fn loss(&self, p: &TsuParams) -> Result<f64> {
            Ok(mse_loss_and_grad(p, self.0)?.0)
        }
        fn loss_and_grad(&self, p: &TsuParams) -> Result<(f64, TsuParams)> {
            mse_loss_and_grad(p, self.0)
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        for (seed, d) in [(1u64, 2usize), (2, 3), (3, 5)] {
            let mut p = TsuParams::new(d, seed);
            p.norm.gain.mapv_inplace(|g| g * 0.7 + 0.1);
            let pairs = PairSet {
                inputs: random_matrix(6, 3 * d, seed + 50),
                targets: random_matrix(6, d, seed + 60),
            };
            let check = check_gradient(&Mse(&pairs), &p, 1e-6, 1e-6).unwrap();
            assert!(check.max_relative_error < 1e-4, "d={d}: {check:?}");
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn visited_rows_stay_frozen(seed in 0u64..10_000, tau in -0.5f64..0.95) {
            let z = random_matrix(9, 3, seed);
            let v = random_matrix(9, 3, seed + 1);
            let p = TsuParams::new(3, seed);
            let mut st = SlideState::new(z.view(), 6).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut order: Vec<usize> = (0..9).collect();
            order.shuffle(&mut rng);
            for (t, &a) in order.iter().take(6).enumerate() {
                let before = st.s.clone();
                st.apply_update(a, v.row(a), Some(&p), UpdateRule::Targeted { tau }).unwrap();
                prop_assert_eq!(st.t(), t + 1);
                for &i in &order[..t] {
                    prop_assert_eq!(st.s.row(i), before.row(i));
                }
            }
            let mut replay = SlideState::new(z.view(), 6).unwrap();
            for &a in st.order() {
                replay.apply_update(a, v.row(a), Some(&p), UpdateRule::Targeted { tau }).unwrap();
            }
            prop_assert_eq!(replay, st);
        }
    }
}

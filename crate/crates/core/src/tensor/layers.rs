use ndarray::{Array1, Array2, ArrayView2, ArrayViewD, ArrayViewMutD, Axis};
use rand::Rng;

use super::{init_uniform, prefixed, prefixed_mut, ParamSet};
use crate::error::{Error, Result};

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Fully connected layer, `y = x W + b` with `W` stored as `in × out`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(rng: &mut R, fan_in: usize, fan_out: usize) -> Self {
        let weight = Array2::from_shape_fn((fan_in, fan_out), |_| init_uniform(rng, fan_in));
        Linear {
            weight,
            bias: Array1::zeros(fan_out),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.nrows()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.ncols()
    }

    pub fn forward(&self, x: ArrayView2<'_, f64>) -> Array2<f64> {
        x.dot(&self.weight) + &self.bias
    }

    /// Accumulates parameter gradients into `grad` and returns `dL/dx`
    /// when `want_input_grad` is set.
    pub fn backward(
        &self,
        x: ArrayView2<'_, f64>,
        dy: ArrayView2<'_, f64>,
        grad: &mut Linear,
        want_input_grad: bool,
    ) -> Option<Array2<f64>> {
        grad.weight += &x.t().dot(&dy);
        grad.bias += &dy.sum_axis(Axis(0));
        want_input_grad.then(|| dy.dot(&self.weight.t()))
    }
}

impl ParamSet for Linear {
    fn visit(&self, f: &mut dyn FnMut(&str, ArrayViewD<'_, f64>)) {
        f("weight", self.weight.view().into_dyn());
        f("bias", self.bias.view().into_dyn());
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, ArrayViewMutD<'_, f64>)) {
        f("weight", self.weight.view_mut().into_dyn());
        f("bias", self.bias.view_mut().into_dyn());
    }
}

/// Gated attention scorer: `score(sigmoid(proj_a x) * tanh(proj_b x))`.
#[derive(Debug, Clone, PartialEq)]
pub struct GatedAttention {
    pub proj_a: Linear,
    pub proj_b: Linear,
    pub score: Linear,
}

/// Intermediate activations kept for the backward pass.
#[derive(Debug, Clone)]
pub struct GatedCache {
    gate: Array2<f64>,
    value: Array2<f64>,
}

impl GatedAttention {
    pub fn new<R: Rng + ?Sized>(rng: &mut R, dim: usize, hidden: usize, heads: usize) -> Self {
        GatedAttention {
            proj_a: Linear::new(rng, dim, hidden),
            proj_b: Linear::new(rng, dim, hidden),
            score: Linear::new(rng, hidden, heads),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.proj_a.in_dim()
    }

    pub fn hidden(&self) -> usize {
        self.proj_a.out_dim()
    }

    pub fn heads(&self) -> usize {
        self.score.out_dim()
    }

    fn check_input(&self, x: &ArrayView2<'_, f64>) -> Result<()> {
        if x.ncols() != self.in_dim() {
            return Err(Error::dim("gated attention input width", self.in_dim(), x.ncols()));
        }
        Ok(())
    }

    /// Raw, unnormalised scores (`n × heads`).
    pub fn scores(&self, x: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        Ok(self.forward(x)?.0)
    }

    pub fn forward(&self, x: ArrayView2<'_, f64>) -> Result<(Array2<f64>, GatedCache)> {
        self.check_input(&x)?;
        let gate = self.proj_a.forward(x).mapv_into(sigmoid);
        let value = self.proj_b.forward(x).mapv_into(f64::tanh);
        let gated = &gate * &value;
        let scores = self.score.forward(gated.view());
        Ok((scores, GatedCache { gate, value }))
    }

    pub fn backward(
        &self,
        x: ArrayView2<'_, f64>,
        cache: &GatedCache,
        dscores: ArrayView2<'_, f64>,
        grad: &mut GatedAttention,
        want_input_grad: bool,
    ) -> Option<Array2<f64>> {
        let gated = &cache.gate * &cache.value;
        let dgated = self
            .score
            .backward(gated.view(), dscores, &mut grad.score, true)
            .expect("requested");
        let mut dpre_a = &dgated * &cache.value;
        dpre_a.zip_mut_with(&cache.gate, |d, g| *d *= g * (1.0 - g));
        let mut dpre_b = &dgated * &cache.gate;
        dpre_b.zip_mut_with(&cache.value, |d, v| *d *= 1.0 - v * v);
        let dx_a = self
            .proj_a
            .backward(x, dpre_a.view(), &mut grad.proj_a, want_input_grad);
        let dx_b = self
            .proj_b
            .backward(x, dpre_b.view(), &mut grad.proj_b, want_input_grad);
        match (dx_a, dx_b) {
            (Some(a), Some(b)) => Some(a + b),
            _ => None,
        }
    }
}

impl ParamSet for GatedAttention {
    fn visit(&self, f: &mut dyn FnMut(&str, ArrayViewD<'_, f64>)) {
        self.proj_a.visit(&mut prefixed("proj_a", f));
        self.proj_b.visit(&mut prefixed("proj_b", f));
        self.score.visit(&mut prefixed("score", f));
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, ArrayViewMutD<'_, f64>)) {
        self.proj_a.visit_mut(&mut prefixed_mut("proj_a", f));
        self.proj_b.visit_mut(&mut prefixed_mut("proj_b", f));
        self.score.visit_mut(&mut prefixed_mut("score", f));
    }
}

/// Row-wise layer normalisation with a learned gain and no bias.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerNorm {
    pub gain: Array1<f64>,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new(dim: usize) -> Self {
        LayerNorm {
            gain: Array1::ones(dim),
            eps: 1e-5,
        }
    }

    /// Returns the output and the normalised (pre-gain) rows with their
    /// inverse standard deviations.
    pub fn forward(&self, x: ArrayView2<'_, f64>) -> (Array2<f64>, Array2<f64>, Array1<f64>) {
        let d = x.ncols() as f64;
        let mut normed = x.to_owned();
        let mut inv_std = Array1::zeros(x.nrows());
        for (mut row, inv) in normed.rows_mut().into_iter().zip(inv_std.iter_mut()) {
            let mean = row.sum() / d;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d;
            *inv = 1.0 / (var + self.eps).sqrt();
            row.mapv_inplace(|v| (v - mean) * *inv);
        }
        let out = &normed * &self.gain;
        (out, normed, inv_std)
    }

    pub fn backward(
        &self,
        normed: &Array2<f64>,
        inv_std: &Array1<f64>,
        dy: ArrayView2<'_, f64>,
        grad: &mut LayerNorm,
    ) -> Array2<f64> {
        grad.gain += &(&dy * normed).sum_axis(Axis(0));
        let d = normed.ncols() as f64;
        let dnormed = &dy * &self.gain;
        let mut dx = Array2::zeros(dy.raw_dim());
        for (i, mut out) in dx.rows_mut().into_iter().enumerate() {
            let dn = dnormed.row(i);
            let n = normed.row(i);
            let mean_dn = dn.sum() / d;
            let mean_dn_n = dn.dot(&n) / d;
            for j in 0..out.len() {
                out[j] = inv_std[i] * (dn[j] - mean_dn - n[j] * mean_dn_n);
            }
        }
        dx
    }
}

impl ParamSet for LayerNorm {
    fn visit(&self, f: &mut dyn FnMut(&str, ArrayViewD<'_, f64>)) {
        f("gain", self.gain.view().into_dyn());
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, ArrayViewMutD<'_, f64>)) {
        f("gain", self.gain.view_mut().into_dyn());
    }
}

/// Softmax over the entries whose `masked` flag is false; masked entries
/// get probability exactly zero (their logit is treated as -inf).
pub fn masked_softmax(scores: &[f64], masked: &[bool]) -> Result<Vec<f64>> {
    if scores.len() != masked.len() {
        return Err(Error::dim("softmax mask", scores.len(), masked.len()));
    }
    let max = scores
        .iter()
        .zip(masked)
        .filter(|(_, m)| !**m)
        .map(|(s, _)| *s)
        .fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return Err(Error::ExhaustedActions);
    }
    if !max.is_finite() {
        return Err(Error::Numeric("softmax scores".into()));
    }
    let mut out: Vec<f64> = scores
        .iter()
        .zip(masked)
        .map(|(s, m)| if *m { 0.0 } else { (s - max).exp() })
        .collect();
    let total: f64 = out.iter().sum();
    out.iter_mut().for_each(|p| *p /= total);
    Ok(out)
}

/// Log-probabilities for the same masking convention; masked entries are -inf.
pub fn log_softmax(scores: &[f64], masked: &[bool]) -> Result<Vec<f64>> {
    if scores.len() != masked.len() {
        return Err(Error::dim("softmax mask", scores.len(), masked.len()));
    }
    let max = scores
        .iter()
        .zip(masked)
        .filter(|(_, m)| !**m)
        .map(|(s, _)| *s)
        .fold(f64::NEG_INFINITY, f64::max);
    let lse = max
        + scores
            .iter()
            .zip(masked)
            .filter(|(_, m)| !**m)
            .map(|(s, _)| (s - max).exp())
            .sum::<f64>()
            .ln();
    if max == f64::NEG_INFINITY {
        return Err(Error::ExhaustedActions);
    }
    Ok(scores
        .iter()
        .zip(masked)
        .map(|(s, m)| if *m { f64::NEG_INFINITY } else { s - lse })
        .collect())
}

/// Vector-Jacobian product of softmax: given `p` and `dL/dp`, returns `dL/ds`.
pub fn softmax_backward(p: &[f64], dp: &[f64]) -> Vec<f64> {
    let inner: f64 = p.iter().zip(dp).map(|(a, b)| a * b).sum();
    p.iter().zip(dp).map(|(pi, di)| pi * (di - inner)).collect()
}

//! Minimal numeric substrate: dense layers, the gated-attention block,
//! softmax with action masking, Adam-family optimizers and a central
//! finite-difference gradient verifier.
//!
//! Every trainable network implements [`ParamSet`], which gives a stable,
//! named, flattened view of its tensors. Optimizers and gradient checks only
//! ever see that flat view, and gradients are returned as a value of the same
//! type as the parameters.

mod gradcheck;
mod layers;
mod optim;

pub use gradcheck::{central_difference, check_gradient, grad, GradCheck, Objective};
pub use layers::{
    log_softmax, masked_softmax, sigmoid, softmax_backward, GatedAttention, GatedCache, LayerNorm,
    Linear,
};
pub use optim::{clip_global_norm, global_norm, Algorithm, Optimizer, OptimizerConfig, Schedule};

use ndarray::{ArrayViewD, ArrayViewMutD};
use rand::Rng;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// A fixed collection of named, shaped parameter tensors.
pub trait ParamSet: Clone {
    /// Visit every tensor in a stable order.
    fn visit(&self, f: &mut dyn FnMut(&str, ArrayViewD<'_, f64>));

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, ArrayViewMutD<'_, f64>));

    fn num_params(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |_, a| n += a.len());
        n
    }

    fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.visit_mut(&mut |_, mut a| a.fill(0.0));
        z
    }

    fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        self.visit(&mut |_, a| out.extend(a.iter().copied()));
        out
    }

    fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        let expected = self.num_params();
        if flat.len() != expected {
            return Err(Error::dim("flat parameter vector", expected, flat.len()));
        }
        let mut offset = 0;
        self.visit_mut(&mut |_, mut a| {
            for (dst, src) in a.iter_mut().zip(&flat[offset..]) {
                *dst = *src;
            }
            offset += a.len();
        });
        Ok(())
    }

    /// `self += scale * other`, element-wise.
    fn add_scaled(&mut self, other: &Self, scale: f64) {
        let flat = other.to_flat();
        let mut offset = 0;
        self.visit_mut(&mut |_, mut a| {
            for (dst, src) in a.iter_mut().zip(&flat[offset..]) {
                *dst += scale * src;
            }
            offset += a.len();
        });
    }

    fn all_finite(&self) -> bool {
        let mut ok = true;
        self.visit(&mut |_, a| ok &= a.iter().all(|v| v.is_finite()));
        ok
    }

    /// Names and shapes in visiting order.
    fn layout(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        self.visit(&mut |name, a| out.push((name.to_string(), a.shape().to_vec())));
        out
    }

    /// Short content hash, used to reference parameter snapshots in errors
    /// and run manifests.
    fn fingerprint(&self) -> String {
        let mut hasher = Sha256::new();
        self.visit(&mut |name, a| {
            hasher.update(name.as_bytes());
            for v in a.iter() {
                hasher.update(v.to_le_bytes());
            }
        });
        let digest = hasher.finalize();
        digest[..8].iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Prefix helper for composite parameter sets.
pub(crate) fn prefixed<'a>(
    prefix: &'a str,
    f: &'a mut dyn FnMut(&str, ArrayViewD<'_, f64>),
) -> impl FnMut(&str, ArrayViewD<'_, f64>) + 'a {
    move |name, a| f(&format!("{prefix}.{name}"), a)
}

pub(crate) fn prefixed_mut<'a>(
    prefix: &'a str,
    f: &'a mut dyn FnMut(&str, ArrayViewMutD<'_, f64>),
) -> impl FnMut(&str, ArrayViewMutD<'_, f64>) + 'a {
    move |name, a| f(&format!("{prefix}.{name}"), a)
}

/// Uniform in `±1/sqrt(fan_in)`.
pub(crate) fn init_uniform<R: Rng + ?Sized>(rng: &mut R, fan_in: usize) -> f64 {
    let bound = 1.0 / (fan_in as f64).sqrt();
    rng.gen_range(-bound..=bound)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn flat_round_trip_preserves_layout() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let g = GatedAttention::new(&mut rng, 5, 4, 2);
        let flat = g.to_flat();
        let mut h = g.zeros_like();
        assert!(h.to_flat().iter().all(|v| *v == 0.0));
        h.set_flat(&flat).unwrap();
        assert_eq!(h.to_flat(), flat);
        assert_eq!(g.fingerprint(), h.fingerprint());
        assert!(h.set_flat(&flat[1..]).is_err());
    }
}

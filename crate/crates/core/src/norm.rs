//! Row normalizers that map attention logits onto the probability simplex.
//!
//! Each normalizer is a strategy behind [`RowNormalizer`]; the model looks one
//! up by name through [`NormalizerRegistry`], so `"sparsemax"` and `"softmax"`
//! are interchangeable at configuration time.

use std::collections::BTreeMap;
use std::sync::Arc;

use crate::error::{Error, Result};

pub trait RowNormalizer: Send + Sync + std::fmt::Debug {
    fn name(&self) -> &'static str;

    /// Writes the normalized row into `out` (same length as `logits`).
    fn forward(&self, logits: &[f64], out: &mut [f64]);

    /// Vector-Jacobian product. Both supported normalizers have Jacobians that
    /// depend only on the forward output, so that is all the tape saves.
    fn backward(&self, output: &[f64], grad_out: &[f64], grad_in: &mut [f64]);
}

/// Euclidean projection onto the probability simplex.
#[derive(Debug, Default, Clone, Copy)]
pub struct Sparsemax;

#[derive(Debug, Default, Clone, Copy)]
pub struct Softmax;

impl RowNormalizer for Sparsemax {
    fn name(&self) -> &'static str {
        "sparsemax"
    }

    fn forward(&self, logits: &[f64], out: &mut [f64]) {
        // Fixed-point iteration on the threshold: the candidate support only
        // shrinks and the loop stops once it is stable, which gives the exact
        // projection without sorting.
        let mut tau = f64::NEG_INFINITY;
        let mut count = usize::MAX;
        loop {
            let (mut sum, mut k) = (0.0, 0usize);
            for &z in logits {
                if z > tau {
                    sum += z;
                    k += 1;
                }
            }
            if k == count {
                break;
            }
            count = k;
            tau = (sum - 1.0) / k as f64;
        }
        for (o, &z) in out.iter_mut().zip(logits) {
            *o = (z - tau).max(0.0);
        }
    }

    fn backward(&self, output: &[f64], grad_out: &[f64], grad_in: &mut [f64]) {
        // Generalized Jacobian on the support chosen in the forward pass.
        let mut count = 0usize;
        let mut sum = 0.0;
        for (&p, &g) in output.iter().zip(grad_out) {
            if p > 0.0 {
                count += 1;
                sum += g;
            }
        }
        let mean = if count > 0 { sum / count as f64 } else { 0.0 };
        for ((gi, &p), &g) in grad_in.iter_mut().zip(output).zip(grad_out) {
            *gi += if p > 0.0 { g - mean } else { 0.0 };
        }
    }
}

impl RowNormalizer for Softmax {
    fn name(&self) -> &'static str {
        "softmax"
    }

    fn forward(&self, logits: &[f64], out: &mut [f64]) {
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for (o, &z) in out.iter_mut().zip(logits) {
            *o = (z - max).exp();
            total += *o;
        }
        for o in out.iter_mut() {
            *o /= total;
        }
    }

    fn backward(&self, output: &[f64], grad_out: &[f64], grad_in: &mut [f64]) {
        let dot: f64 = output.iter().zip(grad_out).map(|(p, g)| p * g).sum();
        for ((gi, &p), &g) in grad_in.iter_mut().zip(output).zip(grad_out) {
            *gi += p * (g - dot);
        }
    }
}

/// Sparsemax of a single vector.
pub fn sparsemax(z: &[f64]) -> Result<Vec<f64>> {
    normalize_with(&Sparsemax, z)
}

pub fn softmax(z: &[f64]) -> Result<Vec<f64>> {
    normalize_with(&Softmax, z)
}

fn normalize_with(norm: &dyn RowNormalizer, z: &[f64]) -> Result<Vec<f64>> {
    if z.is_empty() {
        return Err(Error::contract(format!("{} of an empty vector", norm.name())));
    }
    if let Some(index) = z.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite { context: norm.name().to_string(), index });
    }
    let mut out = vec![0.0; z.len()];
    norm.forward(z, &mut out);
    Ok(out)
}

#[derive(Clone)]
pub struct NormalizerRegistry {
    entries: BTreeMap<&'static str, Arc<dyn RowNormalizer>>,
}

impl NormalizerRegistry {
    pub fn empty() -> Self {
        NormalizerRegistry { entries: BTreeMap::new() }
    }

    pub fn register(&mut self, norm: Arc<dyn RowNormalizer>) {
        self.entries.insert(norm.name(), norm);
    }

    pub fn get(&self, name: &str) -> Result<Arc<dyn RowNormalizer>> {
        self.entries.get(name).cloned().ok_or_else(|| Error::UnknownStrategy {
            kind: "attention normalizer",
            name: name.to_string(),
            known: self.names().join(", "),
        })
    }

    pub fn names(&self) -> Vec<&'static str> {
        self.entries.keys().copied().collect()
    }
}

impl Default for NormalizerRegistry {
    fn default() -> Self {
        let mut r = Self::empty();
        r.register(Arc::new(Sparsemax));
        r.register(Arc::new(Softmax));
        r
    }
}

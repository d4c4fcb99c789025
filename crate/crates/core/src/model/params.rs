use std::collections::BTreeMap;

use rand::Rng;

use super::ModelConfig;
use crate::error::{ensure, Result};
use crate::seed;
use crate::tensor::Tensor;

/// Named learnable tensors. Iteration order is the sorted name order, which
/// fixes the layout of checkpoints and optimizer state.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    tensors: BTreeMap<String, Tensor>,
}

fn glorot(shape: &[usize], fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> Tensor {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    Tensor::from_fn(shape, |_| rng.random_range(-bound..bound))
}

impl ModelParams {
    /// Scaled-uniform kernels and projections, zero biases and position
    /// embeddings, unit layer-norm scales; seeded from `config.seed`.
    pub fn init(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = seed::rng(seed::derive(config.seed, &[seed::tag("init")]));
        let mut t = BTreeMap::new();
        let k = config.kernel_size;
        let d = config.embed_dim;
        let mut cin = 1;
        for (i, &cout) in config.conv_channels.iter().enumerate() {
            t.insert(format!("stem.{i}.kernel"), glorot(&[k, k, cin, cout], cin * k * k, cout * k * k, &mut rng));
            t.insert(format!("stem.{i}.bias"), Tensor::zeros(&[cout]));
            cin = cout;
        }
        let token_in = config.stem_channels() * config.n_networks;
        t.insert("embed.weight".into(), glorot(&[token_in, d], token_in, d, &mut rng));
        t.insert("embed.bias".into(), Tensor::zeros(&[d]));
        t.insert("pos.spatial".into(), Tensor::zeros(&[config.n_networks, d]));
        t.insert("pos.temporal".into(), Tensor::zeros(&[config.n_windows, d]));
        for b in 0..config.n_blocks {
            for stream in ["spatial", "temporal"] {
                for proj in ["q", "k", "v", "out"] {
                    t.insert(format!("block.{b}.{stream}.{proj}.weight"), glorot(&[d, d], d, d, &mut rng));
                    t.insert(format!("block.{b}.{stream}.{proj}.bias"), Tensor::zeros(&[d]));
                }
            }
            t.insert(format!("block.{b}.fuse.weight"), glorot(&[d, d], d, d, &mut rng));
            t.insert(format!("block.{b}.fuse.bias"), Tensor::zeros(&[d]));
            for norm in ["norm1", "norm2"] {
                t.insert(format!("block.{b}.{norm}.gamma"), Tensor::filled(&[d], 1.0));
                t.insert(format!("block.{b}.{norm}.beta"), Tensor::zeros(&[d]));
            }
            let f = config.ffn_dim;
            t.insert(format!("block.{b}.ffn.w1"), glorot(&[d, f], d, f, &mut rng));
            t.insert(format!("block.{b}.ffn.b1"), Tensor::zeros(&[f]));
            t.insert(format!("block.{b}.ffn.w2"), glorot(&[f, d], f, d, &mut rng));
            t.insert(format!("block.{b}.ffn.b2"), Tensor::zeros(&[d]));
        }
        let out = config.head_outputs();
        t.insert("head.weight".into(), glorot(&[d, out], d, out, &mut rng));
        t.insert("head.bias".into(), Tensor::zeros(&[out]));
        Ok(ModelParams { tensors: t })
    }

    /// Wraps externally supplied tensors (e.g. from a checkpoint) after
    /// checking them against the shapes `config` implies.
    pub fn from_tensors(config: &ModelConfig, tensors: BTreeMap<String, Tensor>) -> Result<Self> {
        let reference = Self::init(config)?;
        ensure!(
            reference.tensors.len() == tensors.len(),
            "expected {} parameter tensors, got {}",
            reference.tensors.len(),
            tensors.len()
        );
        for (name, r) in &reference.tensors {
            let t = tensors.get(name).ok_or_else(|| crate::Error::Contract(format!("missing parameter `{name}`")))?;
            ensure!(t.shape() == r.shape(), "parameter `{}` has shape {:?}, expected {:?}", name, t.shape(), r.shape());
            t.check_finite(name)?;
        }
        Ok(ModelParams { tensors })
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.tensors.iter_mut()
    }

    pub fn names(&self) -> Vec<String> {
        self.tensors.keys().cloned().collect()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn n_scalars(&self) -> usize {
        self.tensors.values().map(|t| t.len()).sum()
    }

    pub fn into_tensors(self) -> BTreeMap<String, Tensor> {
        self.tensors
    }
}

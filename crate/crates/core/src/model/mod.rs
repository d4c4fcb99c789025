//! Convolution + factorized spatio-temporal sparse self-attention classifier.
//!
//! Data flow for a batch of `B` subjects with `W` windows of `N x N` FNC:
//!
//! ```text
//! [B, W, N, N] -> conv stem per window -> [B*W, N, N, c]
//!   -> tokens: one per (window, network), row features projected to d -> [B, W, N, d]
//!   -> + spatial embedding (per network) + temporal embedding (per window)
//!   -> L blocks: spatial attention (over N, per window) and temporal
//!      attention (over W, per network), summed, projected, residual + norm,
//!      feed-forward, residual + norm
//!   -> mean over W and N -> linear head -> logits
//! ```

mod config;
mod params;

use std::collections::BTreeMap;
use std::sync::Arc;

use rand_chacha::ChaCha8Rng;

pub use config::ModelConfig;
pub use params::ModelParams;

use crate::dfnc::DfncSequence;
use crate::error::{ensure, Result};
use crate::graph::{Graph, Var};
use crate::norm::{NormalizerRegistry, RowNormalizer};
use crate::tensor::Tensor;

/// Whether dropout is active.
pub enum Mode<'a> {
    Eval,
    Train(&'a mut ChaCha8Rng),
}

impl Mode<'_> {
    fn dropout(&mut self, g: &mut Graph, x: Var, rate: f64) -> Result<Var> {
        match self {
            Mode::Eval => Ok(x),
            Mode::Train(rng) => g.dropout(x, rate, *rng),
        }
    }
}

/// Parameters placed on a graph, by name.
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    pub fn get(&self, name: &str) -> Var {
        *self.vars.get(name).unwrap_or_else(|| panic!("parameter `{name}` is not bound"))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }
}

/// Per-subject attention maps, rows on the probability simplex.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionRecord {
    pub n_networks: usize,
    pub n_windows: usize,
    /// `N x N`, averaged over windows, heads and blocks.
    pub attn_s: Vec<f64>,
    /// `W x W`, averaged over networks, heads and blocks.
    pub attn_t: Vec<f64>,
    /// Per-block `(attn_s, attn_t)` when requested.
    pub per_block: Option<Vec<(Vec<f64>, Vec<f64>)>>,
}

/// Handles to the interesting nodes of one forward pass.
pub struct ForwardTrace {
    pub batch: usize,
    /// `[B, out]` logits (`out` = 1 for binary).
    pub logits: Var,
    /// Pre-activation output of each conv layer, `[B*W, N, N, c]`.
    pub stem_pre: Vec<Var>,
    /// Post-activation output of each conv layer, `[B*W, N, N, c]`.
    pub stem_post: Vec<Var>,
    /// Tokens entering the first block, `[B, W, N, d]`.
    pub tokens: Var,
    /// Per block, `[B*W*h, N, N]`.
    pub spatial_weights: Vec<Var>,
    /// Per block, `[B*N*h, W, W]`.
    pub temporal_weights: Vec<Var>,
}

#[derive(Clone, Debug)]
pub struct Model {
    config: ModelConfig,
    norm: Arc<dyn RowNormalizer>,
}

impl Model {
    pub fn new(config: ModelConfig) -> Result<Self> {
        Self::with_registry(config, &NormalizerRegistry::default())
    }

    pub fn with_registry(config: ModelConfig, registry: &NormalizerRegistry) -> Result<Self> {
        config.validate()?;
        let norm = registry.get(&config.attention)?;
        Ok(Model { config, norm })
    }

    /// Uses `norm` for attention rows regardless of `config.attention`'s
    /// registry lookup; the name is still recorded in the config.
    pub fn with_normalizer(config: ModelConfig, norm: Arc<dyn RowNormalizer>) -> Result<Self> {
        config.validate()?;
        Ok(Model { config, norm })
    }

    pub fn normalizer(&self) -> Arc<dyn RowNormalizer> {
        self.norm.clone()
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn init_params(&self) -> Result<ModelParams> {
        ModelParams::init(&self.config)
    }

    /// Places every parameter on `g` as a differentiable leaf.
    pub fn bind(&self, g: &mut Graph, params: &ModelParams) -> Bound {
        Bound { vars: params.iter().map(|(n, t)| (n.clone(), g.leaf(t.clone()))).collect() }
    }

    /// Places parameters as constants; for inference without gradients.
    pub fn bind_frozen(&self, g: &mut Graph, params: &ModelParams) -> Bound {
        Bound { vars: params.iter().map(|(n, t)| (n.clone(), g.constant(t.clone()))).collect() }
    }

    /// Stacks subjects into a `[B, W, N, N]` tensor, checking extents.
    pub fn stack_inputs(&self, inputs: &[&DfncSequence]) -> Result<Tensor> {
        ensure!(!inputs.is_empty(), "empty batch");
        let (w, n) = (self.config.n_windows, self.config.n_networks);
        let mut data = Vec::with_capacity(inputs.len() * w * n * n);
        for (i, s) in inputs.iter().enumerate() {
            ensure!(
                s.n_windows() == w && s.networks() == n,
                "subject {} has {} windows of {}x{}, model expects {} of {}x{}",
                i,
                s.n_windows(),
                s.networks(),
                s.networks(),
                w,
                n,
                n
            );
            data.extend_from_slice(s.values());
        }
        Tensor::new(vec![inputs.len(), w, n, n], data)
    }

    /// Convolutional stem over channels-last `[M, N, N, 1]` images. Returns the
    /// pre- and post-GELU output of every layer.
    pub fn conv_stem(&self, g: &mut Graph, p: &Bound, images: Var) -> Result<(Vec<Var>, Vec<Var>)> {
        let s = g.shape(images).to_vec();
        let n = self.config.n_networks;
        ensure!(s.len() == 4 && s[1] == n && s[2] == n && s[3] == 1, "conv stem expects [M, {n}, {n}, 1], got {:?}", s);
        let mut x = images;
        let (mut pre, mut post) = (Vec::new(), Vec::new());
        for i in 0..self.config.conv_channels.len() {
            let y = g.conv2d(x, p.get(&format!("stem.{i}.kernel")), p.get(&format!("stem.{i}.bias")))?;
            pre.push(y);
            x = g.gelu(y);
            post.push(x);
        }
        Ok((pre, post))
    }

    /// Projects each network's feature row (all channels, all columns) to a
    /// `d`-dimensional token and adds the spatial and temporal embeddings.
    /// `features` is channels-last `[B*W, N, N, c]`; the result is `[B, W, N, d]`.
    pub fn embed_tokens(&self, g: &mut Graph, p: &Bound, features: Var, batch: usize) -> Result<Var> {
        let s = g.shape(features).to_vec();
        let (w, n, d) = (self.config.n_windows, self.config.n_networks, self.config.embed_dim);
        let c = self.config.stem_channels();
        ensure!(s == [batch * w, n, n, c], "token embedding expects [{}, {n}, {n}, {c}], got {:?}", batch * w, s);
        let rows = g.reshape(features, &[batch * w * n, n * c])?;
        let tok = g.matmul(rows, p.get("embed.weight"))?;
        let tok = g.add_bias(tok, p.get("embed.bias"))?;
        let tok = g.reshape(tok, &[batch, w, n, d])?;
        let tok = g.add_broadcast(tok, p.get("pos.spatial"), &[2, 3])?;
        g.add_broadcast(tok, p.get("pos.temporal"), &[1, 3])
    }

    fn linear(&self, g: &mut Graph, p: &Bound, x: Var, prefix: &str) -> Result<Var> {
        let y = g.matmul(x, p.get(&format!("{prefix}.weight")))?;
        g.add_bias(y, p.get(&format!("{prefix}.bias")))
    }

    /// Scaled dot-product attention over axis 2 of `[B, G, S, d]`, independently
    /// for each (batch, group). Returns outputs `[B, G, S, d]` and the weights
    /// `[B*G*h, S, S]`.
    fn attend(&self, g: &mut Graph, p: &Bound, x: Var, prefix: &str) -> Result<(Var, Var)> {
        let s = g.shape(x).to_vec();
        let (b, groups, seq, d) = (s[0], s[1], s[2], s[3]);
        let h = self.config.n_heads;
        let dh = d / h;
        let heads = |g: &mut Graph, proj: &str| -> Result<Var> {
            let y = self.linear(g, p, x, &format!("{prefix}.{proj}"))?;
            if h == 1 {
                g.reshape(y, &[b * groups, seq, dh])
            } else {
                let y = g.reshape(y, &[b * groups, seq, h, dh])?;
                let y = g.permute(y, &[0, 2, 1, 3])?;
                g.reshape(y, &[b * groups * h, seq, dh])
            }
        };
        let q = heads(g, "q")?;
        let k = heads(g, "k")?;
        let v = heads(g, "v")?;
        let q = g.scale(q, 1.0 / (dh as f64).sqrt());
        let logits = g.batch_matmul(q, k, true)?;
        let weights = g.normalize(logits, self.norm.clone());
        let out = g.batch_matmul(weights, v, false)?;
        let out = if h == 1 {
            g.reshape(out, &[b, groups, seq, d])?
        } else {
            let o = g.reshape(out, &[b * groups, h, seq, dh])?;
            let o = g.permute(o, &[0, 2, 1, 3])?;
            g.reshape(o, &[b, groups, seq, d])?
        };
        let out = self.linear(g, p, out, &format!("{prefix}.out"))?;
        Ok((out, weights))
    }

    /// Attention among the `N` network tokens of each window.
    pub fn spatial_attention(&self, g: &mut Graph, p: &Bound, block: usize, tokens: Var) -> Result<(Var, Var)> {
        self.check_tokens(g, tokens)?;
        self.attend(g, p, tokens, &format!("block.{block}.spatial"))
    }

    /// Attention among the `W` window tokens of each network.
    pub fn temporal_attention(&self, g: &mut Graph, p: &Bound, block: usize, tokens: Var) -> Result<(Var, Var)> {
        self.check_tokens(g, tokens)?;
        let by_network = g.permute(tokens, &[0, 2, 1, 3])?;
        let (out, weights) = self.attend(g, p, by_network, &format!("block.{block}.temporal"))?;
        Ok((g.permute(out, &[0, 2, 1, 3])?, weights))
    }

    fn check_tokens(&self, g: &Graph, tokens: Var) -> Result<()> {
        let s = g.shape(tokens);
        ensure!(
            s.len() == 4 && s[1] == self.config.n_windows && s[2] == self.config.n_networks && s[3] == self.config.embed_dim,
            "tokens must be [B, {}, {}, {}], got {:?}",
            self.config.n_windows,
            self.config.n_networks,
            self.config.embed_dim,
            s
        );
        Ok(())
    }

    /// Sum of the two streams, projection, residual + layer norm, then a
    /// feed-forward sublayer with its own residual + layer norm.
    pub fn fuse_streams(&self, g: &mut Graph, p: &Bound, block: usize, out_s: Var, out_t: Var, tokens_in: Var, mode: &mut Mode<'_>) -> Result<Var> {
        ensure!(
            g.shape(out_s) == g.shape(out_t) && g.shape(out_s) == g.shape(tokens_in),
            "fusion inputs disagree: {:?} {:?} {:?}",
            g.shape(out_s),
            g.shape(out_t),
            g.shape(tokens_in)
        );
        let pre = format!("block.{block}");
        let sum = g.add(out_s, out_t)?;
        let fused = self.linear(g, p, sum, &format!("{pre}.fuse"))?;
        let fused = mode.dropout(g, fused, self.config.dropout)?;
        let res = g.add(fused, tokens_in)?;
        let y = g.layer_norm(res, p.get(&format!("{pre}.norm1.gamma")), p.get(&format!("{pre}.norm1.beta")))?;
        let hdn = g.matmul(y, p.get(&format!("{pre}.ffn.w1")))?;
        let hdn = g.add_bias(hdn, p.get(&format!("{pre}.ffn.b1")))?;
        let hdn = g.gelu(hdn);
        let f = g.matmul(hdn, p.get(&format!("{pre}.ffn.w2")))?;
        let f = g.add_bias(f, p.get(&format!("{pre}.ffn.b2")))?;
        let f = mode.dropout(g, f, self.config.dropout)?;
        let res = g.add(y, f)?;
        g.layer_norm(res, p.get(&format!("{pre}.norm2.gamma")), p.get(&format!("{pre}.norm2.beta")))
    }

    /// Full forward pass over a `[B, W, N, N]` input node.
    pub fn forward_graph(&self, g: &mut Graph, p: &Bound, input: Var, mode: &mut Mode<'_>) -> Result<ForwardTrace> {
        let s = g.shape(input).to_vec();
        let (w, n) = (self.config.n_windows, self.config.n_networks);
        ensure!(s.len() == 4 && s[1] == w && s[2] == n && s[3] == n, "input must be [B, {w}, {n}, {n}], got {:?}", s);
        let batch = s[0];
        let images = g.reshape(input, &[batch * w, n, n, 1])?;
        let (stem_pre, stem_post) = self.conv_stem(g, p, images)?;
        let tokens = self.embed_tokens(g, p, *stem_post.last().unwrap(), batch)?;
        let mut x = tokens;
        let (mut spatial_weights, mut temporal_weights) = (Vec::new(), Vec::new());
        for block in 0..self.config.n_blocks {
            let (out_s, ws) = self.spatial_attention(g, p, block, x)?;
            let (out_t, wt) = self.temporal_attention(g, p, block, x)?;
            x = self.fuse_streams(g, p, block, out_s, out_t, x, mode)?;
            spatial_weights.push(ws);
            temporal_weights.push(wt);
        }
        let pooled = g.mean_axis(x, 1)?;
        let pooled = g.mean_axis(pooled, 1)?;
        let logits = self.linear(g, p, pooled, "head")?;
        Ok(ForwardTrace { batch, logits, stem_pre, stem_post, tokens, spatial_weights, temporal_weights })
    }

    /// Per-subject attention maps from a finished forward pass.
    pub fn attention_records(&self, g: &Graph, trace: &ForwardTrace, per_block: bool) -> Vec<AttentionRecord> {
        let (w, n, h) = (self.config.n_windows, self.config.n_networks, self.config.n_heads);
        let blocks = trace.spatial_weights.len();
        (0..trace.batch)
            .map(|b| {
                let mut blocks_out = Vec::with_capacity(blocks);
                for (ws, wt) in trace.spatial_weights.iter().zip(&trace.temporal_weights) {
                    let s = mean_of_slices(&g.value(*ws).data()[b * w * h * n * n..(b + 1) * w * h * n * n], n * n);
                    let t = mean_of_slices(&g.value(*wt).data()[b * n * h * w * w..(b + 1) * n * h * w * w], w * w);
                    blocks_out.push((s, t));
                }
                let attn_s = mean_vectors(blocks_out.iter().map(|(s, _)| s.as_slice()), n * n);
                let attn_t = mean_vectors(blocks_out.iter().map(|(_, t)| t.as_slice()), w * w);
                AttentionRecord { n_networks: n, n_windows: w, attn_s, attn_t, per_block: per_block.then_some(blocks_out) }
            })
            .collect()
    }

    /// Logits for each subject (`out` values per subject), evaluation mode.
    pub fn logits(&self, params: &ModelParams, inputs: &[&DfncSequence]) -> Result<Vec<Vec<f64>>> {
        let mut g = Graph::new();
        let p = self.bind_frozen(&mut g, params);
        let x = g.constant(self.stack_inputs(inputs)?);
        let trace = self.forward_graph(&mut g, &p, x, &mut Mode::Eval)?;
        let out = self.config.head_outputs();
        Ok(g.value(trace.logits).data().chunks(out).map(|c| c.to_vec()).collect())
    }

    /// Positive-class output score (sigmoid of the logit) per subject; binary only.
    pub fn scores(&self, params: &ModelParams, inputs: &[&DfncSequence]) -> Result<Vec<f64>> {
        ensure!(self.config.n_classes == 2, "output scores are defined for binary models");
        Ok(self.logits(params, inputs)?.into_iter().map(|l| sigmoid(l[0])).collect())
    }

    /// Single-subject forward: class scores and attention maps.
    pub fn forward(&self, params: &ModelParams, subject: &DfncSequence) -> Result<(Vec<f64>, AttentionRecord)> {
        let mut g = Graph::new();
        let p = self.bind_frozen(&mut g, params);
        let x = g.constant(self.stack_inputs(&[subject])?);
        let trace = self.forward_graph(&mut g, &p, x, &mut Mode::Eval)?;
        let logits = g.value(trace.logits).data().to_vec();
        let rec = self.attention_records(&g, &trace, false).pop().unwrap();
        Ok((logits, rec))
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn mean_of_slices(data: &[f64], size: usize) -> Vec<f64> {
    mean_vectors(data.chunks(size), size)
}

fn mean_vectors<'a>(items: impl Iterator<Item = &'a [f64]>, size: usize) -> Vec<f64> {
    let mut acc = vec![0.0; size];
    let mut count = 0usize;
    for it in items {
        acc.iter_mut().zip(it).for_each(|(a, v)| *a += v);
        count += 1;
    }
    acc.iter_mut().for_each(|a| *a /= count.max(1) as f64);
    acc
}

//! Class activation maps over the conv stem, a masking-based fidelity score
//! for comparing CAM variants, domain-block aggregation, and thresholded
//! group-difference maps.

use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dfnc::{DfncSequence, DomainPartition};
use crate::error::{ensure, Error, Result};
use crate::graph::Graph;
use crate::model::{sigmoid, Mode, Model, ModelParams};
use crate::seed;
use crate::tensor::Tensor;

/// Turns one window's activation and gradient (both channels-last
/// `[pixels, channels]`) into a nonnegative per-pixel map.
pub trait CamMethod: Send + Sync {
    fn name(&self) -> &'static str;
    fn window_map(&self, activation: &[f64], gradient: &[f64], channels: usize, out: &mut [f64]);
}

impl fmt::Debug for dyn CamMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "CamMethod({})", self.name())
    }
}

/// Elementwise positive gradients weight the activation at every location.
#[derive(Clone, Copy, Debug, Default)]
pub struct LayerCam;

/// One weight per channel: the spatially averaged gradient.
#[derive(Clone, Copy, Debug, Default)]
pub struct GradCam;

impl CamMethod for LayerCam {
    fn name(&self) -> &'static str {
        "layercam"
    }

    fn window_map(&self, activation: &[f64], gradient: &[f64], channels: usize, out: &mut [f64]) {
        for ((o, a), g) in out.iter_mut().zip(activation.chunks(channels)).zip(gradient.chunks(channels)) {
            let v: f64 = a.iter().zip(g).map(|(a, g)| g.max(0.0) * a).sum();
            *o = v.max(0.0);
        }
    }
}

impl CamMethod for GradCam {
    fn name(&self) -> &'static str {
        "gradcam"
    }

    fn window_map(&self, activation: &[f64], gradient: &[f64], channels: usize, out: &mut [f64]) {
        let pixels = out.len();
        let mut alpha = vec![0.0; channels];
        for g in gradient.chunks(channels) {
            alpha.iter_mut().zip(g).for_each(|(w, g)| *w += g);
        }
        alpha.iter_mut().for_each(|w| *w /= pixels as f64);
        for (o, a) in out.iter_mut().zip(activation.chunks(channels)) {
            let v: f64 = a.iter().zip(&alpha).map(|(a, w)| a * w).sum();
            *o = v.max(0.0);
        }
    }
}

/// CAM variants by name.
#[derive(Clone)]
pub struct CamRegistry {
    methods: BTreeMap<String, Arc<dyn CamMethod>>,
}

impl CamRegistry {
    pub fn empty() -> Self {
        CamRegistry { methods: BTreeMap::new() }
    }

    pub fn register(&mut self, method: Arc<dyn CamMethod>) {
        self.methods.insert(method.name().to_string(), method);
    }

    pub fn get(&self, name: &str) -> Result<Arc<dyn CamMethod>> {
        self.methods.get(name).cloned().ok_or_else(|| Error::UnknownStrategy {
            kind: "CAM method",
            name: name.to_string(),
            known: self.names().join(", "),
        })
    }

    pub fn names(&self) -> Vec<String> {
        self.methods.keys().cloned().collect()
    }
}

impl Default for CamRegistry {
    fn default() -> Self {
        let mut r = Self::empty();
        r.register(Arc::new(LayerCam));
        r.register(Arc::new(GradCam));
        r
    }
}

/// Which class score the map explains.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CamTarget {
    Predicted,
    Class(usize),
}

/// `N x N` nonnegative, symmetric, max-normalized saliency.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SaliencyMap {
    pub n: usize,
    pub values: Vec<f64>,
    /// Set when every raw value was zero; `values` are then all zero.
    pub all_zero: bool,
    /// Class whose score was explained.
    pub class: usize,
}

impl SaliencyMap {
    /// Symmetrizes and max-normalizes a raw map.
    pub fn from_raw(mut values: Vec<f64>, n: usize, class: usize) -> Result<Self> {
        ensure!(values.len() == n * n, "saliency needs {} values, got {}", n * n, values.len());
        for i in 0..n {
            for j in i + 1..n {
                let v = 0.5 * (values[i * n + j] + values[j * n + i]);
                values[i * n + j] = v;
                values[j * n + i] = v;
            }
        }
        let max = values.iter().cloned().fold(0.0, f64::max);
        let all_zero = max <= 0.0;
        if !all_zero {
            values.iter_mut().for_each(|v| *v = (*v / max).max(0.0));
        } else {
            values.iter_mut().for_each(|v| *v = 0.0);
        }
        Ok(SaliencyMap { n, values, all_zero, class })
    }

    pub fn uniform(n: usize) -> Self {
        SaliencyMap { n, values: vec![1.0; n * n], all_zero: false, class: 0 }
    }

    /// Symmetric map with independent uniform upper-triangle entries.
    pub fn random(n: usize, seed_value: u64) -> Self {
        let mut rng = seed::rng(seed_value);
        let mut values = vec![0.0; n * n];
        for i in 0..n {
            for j in i..n {
                let v: f64 = rng.random();
                values[i * n + j] = v;
                values[j * n + i] = v;
            }
        }
        SaliencyMap::from_raw(values, n, 0).expect("extents match by construction")
    }
}

/// Bilinear resampling with aligned corners.
pub fn resize_bilinear(src: &[f64], h: usize, w: usize, out_h: usize, out_w: usize) -> Vec<f64> {
    let coord = |i: usize, n_out: usize, n_in: usize| -> (usize, usize, f64) {
        if n_out == 1 || n_in == 1 {
            return (0, 0, 0.0);
        }
        let x = i as f64 * (n_in - 1) as f64 / (n_out - 1) as f64;
        let lo = (x.floor() as usize).min(n_in - 1);
        let hi = (lo + 1).min(n_in - 1);
        (lo, hi, x - lo as f64)
    };
    let mut out = vec![0.0; out_h * out_w];
    for i in 0..out_h {
        let (y0, y1, fy) = coord(i, out_h, h);
        for j in 0..out_w {
            let (x0, x1, fx) = coord(j, out_w, w);
            let top = src[y0 * w + x0] * (1.0 - fx) + src[y0 * w + x1] * fx;
            let bottom = src[y1 * w + x0] * (1.0 - fx) + src[y1 * w + x1] * fx;
            out[i * out_w + j] = top * (1.0 - fy) + bottom * fy;
        }
    }
    out
}

/// Class `class`'s score as a graph node: the logit for binary class 1, its
/// negation for class 0, or the class logit for multi-class heads.
fn target_score(g: &mut Graph, model: &Model, logits: crate::graph::Var, class: usize) -> Result<crate::graph::Var> {
    let out = model.config().head_outputs();
    let mut sel = vec![0.0; out];
    if out == 1 {
        sel[0] = if class == 1 { 1.0 } else { -1.0 };
    } else {
        ensure!(class < out, "class {} out of range for {} outputs", class, out);
        sel[class] = 1.0;
    }
    let mask = g.constant(Tensor::new(vec![1, out], sel)?);
    let picked = g.mul(logits, mask)?;
    Ok(g.sum(picked))
}

fn predicted_class(model: &Model, logits: &[f64]) -> usize {
    if model.config().head_outputs() == 1 {
        usize::from(sigmoid(logits[0]) >= 0.5)
    } else {
        logits.iter().enumerate().fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best }).0
    }
}

/// Saliency of one subject from conv layer `layer` (post-activation).
pub fn class_activation_map(
    model: &Model,
    params: &ModelParams,
    subject: &DfncSequence,
    layer: usize,
    target: CamTarget,
    method: &dyn CamMethod,
) -> Result<SaliencyMap> {
    let layers = model.config().conv_channels.len();
    ensure!(layer < layers, "conv layer {} does not exist (stem has {})", layer, layers);
    let n = model.config().n_networks;
    let mut g = Graph::new();
    let bound = model.bind(&mut g, params);
    let x = g.constant(model.stack_inputs(&[subject])?);
    let trace = model.forward_graph(&mut g, &bound, x, &mut Mode::Eval)?;
    let logits = g.value(trace.logits).data().to_vec();
    let class = match target {
        CamTarget::Predicted => predicted_class(model, &logits),
        CamTarget::Class(c) => c,
    };
    let score = target_score(&mut g, model, trace.logits, class)?;
    let grads = g.backward(score)?;
    let act_var = trace.stem_post[layer];
    let shape = g.shape(act_var).to_vec();
    let (windows, h, w, c) = (shape[0], shape[1], shape[2], shape[3]);
    let act = g.value(act_var).data();
    let grad = grads.get(act_var);
    let mut acc = vec![0.0; h * w];
    let mut buf = vec![0.0; h * w];
    for (a, gr) in act.chunks(h * w * c).zip(grad.data().chunks(h * w * c)) {
        method.window_map(a, gr, c, &mut buf);
        acc.iter_mut().zip(&buf).for_each(|(s, v)| *s += v);
    }
    acc.iter_mut().for_each(|v| *v /= windows as f64);
    let raw = if (h, w) == (n, n) { acc } else { resize_bilinear(&acc, h, w, n, n) };
    SaliencyMap::from_raw(raw, n, class)
}

/// LayerCAM saliency from conv layer `layer`.
pub fn layercam(model: &Model, params: &ModelParams, subject: &DfncSequence, layer: usize, target: CamTarget) -> Result<SaliencyMap> {
    class_activation_map(model, params, subject, layer, target, &LayerCam)
}

/// Index of the last conv stem layer, the default CAM target.
pub fn default_cam_layer(model: &Model) -> usize {
    model.config().conv_channels.len().saturating_sub(1)
}

/// Probability the model assigns to `class`, for each input.
fn class_probabilities(model: &Model, params: &ModelParams, inputs: &[&DfncSequence], class: usize) -> Result<Vec<f64>> {
    let logits = model.logits(params, inputs)?;
    Ok(logits
        .iter()
        .map(|z| {
            if z.len() == 1 {
                let p = sigmoid(z[0]);
                if class == 1 {
                    p
                } else {
                    1.0 - p
                }
            } else {
                let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let sum: f64 = z.iter().map(|v| (v - max).exp()).sum();
                (z[class] - max).exp() / sum
            }
        })
        .collect())
}

/// Zeroes the `count` most salient network pairs (both orientations) in
/// every window. Ties keep row-major order.
pub fn mask_top_pairs(subject: &DfncSequence, saliency: &SaliencyMap, count: usize) -> DfncSequence {
    let n = saliency.n;
    let mut pairs: Vec<(usize, usize)> = (0..n).flat_map(|i| (i + 1..n).map(move |j| (i, j))).collect();
    pairs.sort_by(|a, b| saliency.values[b.0 * n + b.1].total_cmp(&saliency.values[a.0 * n + a.1]));
    pairs.truncate(count);
    subject.map_windows(|_, m| {
        for &(i, j) in &pairs {
            m[i * n + j] = 0.0;
            m[j * n + i] = 0.0;
        }
    })
}

/// Mean drop in the explained class's probability when the top `f` share of
/// network pairs (by saliency) is zeroed, over `fractions`.
pub fn confidence_fidelity(model: &Model, params: &ModelParams, subject: &DfncSequence, saliency: &SaliencyMap, fractions: &[f64]) -> Result<f64> {
    ensure!(!fractions.is_empty(), "need at least one masking fraction");
    ensure!(fractions.iter().all(|f| *f > 0.0 && *f <= 1.0), "masking fractions must lie in (0, 1], got {:?}", fractions);
    let n = subject.networks();
    ensure!(saliency.n == n, "saliency is {}x{} but the subject has {} networks", saliency.n, saliency.n, n);
    let pairs = n * (n - 1) / 2;
    let masked: Vec<DfncSequence> = fractions.iter().map(|f| mask_top_pairs(subject, saliency, (f * pairs as f64).round() as usize)).collect();
    let mut inputs = vec![subject];
    inputs.extend(masked.iter());
    let probs = class_probabilities(model, params, &inputs, saliency.class)?;
    let base = probs[0];
    Ok(probs[1..].iter().map(|p| base - p).sum::<f64>() / fractions.len() as f64)
}

/// Fidelity of random maps averaged over `seeds` draws, each explaining `class`.
pub fn random_map_fidelity(model: &Model, params: &ModelParams, subject: &DfncSequence, class: usize, fractions: &[f64], seeds: usize, root: u64) -> Result<f64> {
    ensure!(seeds > 0, "need at least one random map");
    let mut total = 0.0;
    for s in 0..seeds {
        let mut map = SaliencyMap::random(subject.networks(), seed::derive(root, &[seed::tag("random-map"), s as u64]));
        map.class = class;
        total += confidence_fidelity(model, params, subject, &map, fractions)?;
    }
    Ok(total / seeds as f64)
}

/// Block means of an `N x N` map over a domain partition.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DomainSaliency {
    pub domains: Vec<String>,
    /// `D x D`, row-major.
    pub values: Vec<f64>,
}

impl DomainSaliency {
    /// Upper-triangle (including diagonal) domain pairs by decreasing `|value|`.
    pub fn ranked_pairs(&self) -> Vec<(String, String, f64)> {
        let d = self.domains.len();
        let mut out: Vec<(String, String, f64)> =
            (0..d).flat_map(|i| (i..d).map(move |j| (i, j))).map(|(i, j)| (self.domains[i].clone(), self.domains[j].clone(), self.values[i * d + j])).collect();
        out.sort_by(|a, b| b.2.abs().total_cmp(&a.2.abs()));
        out
    }
}

pub fn domain_aggregate(map: &[f64], n: usize, partition: &DomainPartition) -> Result<DomainSaliency> {
    ensure!(map.len() == n * n, "map needs {} values, got {}", n * n, map.len());
    partition.check_covers(n)?;
    let ranges = partition.ranges();
    let d = ranges.len();
    let mut values = vec![0.0; d * d];
    for (a, ra) in ranges.iter().enumerate() {
        for (b, rb) in ranges.iter().enumerate() {
            let mut sum = 0.0;
            for i in ra.clone() {
                sum += map[i * n + rb.start..i * n + rb.end].iter().sum::<f64>();
            }
            values[a * d + b] = sum / (ra.len() * rb.len()) as f64;
        }
    }
    Ok(DomainSaliency { domains: partition.names().iter().map(|s| s.to_string()).collect(), values })
}

/// Elementwise mean of equally sized maps.
pub fn mean_map(maps: &[&[f64]]) -> Result<Vec<f64>> {
    ensure!(!maps.is_empty(), "no maps to average");
    let len = maps[0].len();
    ensure!(maps.iter().all(|m| m.len() == len), "maps differ in size");
    let mut acc = vec![0.0; len];
    for m in maps {
        acc.iter_mut().zip(*m).for_each(|(a, v)| *a += v);
    }
    acc.iter_mut().for_each(|a| *a /= maps.len() as f64);
    Ok(acc)
}

/// `mean(A) - mean(B)`, normalized by its largest magnitude, with entries
/// below `threshold` in magnitude dropped from `retained`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DifferenceMap {
    pub n: usize,
    pub difference: Vec<f64>,
    pub normalized: Vec<f64>,
    pub retained: Vec<bool>,
    pub threshold: f64,
}

pub const DEFAULT_DIFFERENCE_THRESHOLD: f64 = 0.7;

pub fn threshold_difference_map(maps_a: &[&[f64]], maps_b: &[&[f64]], n: usize, threshold: f64) -> Result<DifferenceMap> {
    if maps_a.is_empty() {
        return Err(Error::EmptyGroup("A (minuend)".into()));
    }
    if maps_b.is_empty() {
        return Err(Error::EmptyGroup("B (subtrahend)".into()));
    }
    ensure!(maps_a.iter().chain(maps_b).all(|m| m.len() == n * n), "every map must be {}x{}", n, n);
    ensure!(threshold >= 0.0, "threshold must be nonnegative");
    let a = mean_map(maps_a)?;
    let b = mean_map(maps_b)?;
    let difference: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x - y).collect();
    let max = difference.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let normalized: Vec<f64> = if max > 0.0 { difference.iter().map(|v| v / max).collect() } else { vec![0.0; n * n] };
    let retained = normalized.iter().map(|v| v.abs() >= threshold).collect();
    Ok(DifferenceMap { n, difference, normalized, retained, threshold })
}

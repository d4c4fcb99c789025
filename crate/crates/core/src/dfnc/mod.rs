//! Tapered sliding-window dynamic functional network connectivity.
//!
//! A subject's `T x N` network time course becomes a stack of `W` weighted
//! Pearson correlation matrices, one per window of `w` samples advanced by
//! `s` samples.

mod io;
mod partition;

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

pub use io::{
    read_dfnc_bin, read_timecourse, read_timecourse_bin, read_timecourse_csv, sidecar_path, write_dfnc_bin, write_timecourse_bin,
    write_timecourse_csv, DfncSidecar, TimecourseSidecar,
};
pub use partition::{Domain, DomainPartition};

use crate::error::{ensure, Error, Result};
use crate::tensor::Tensor;

pub const DEFAULT_WINDOW: usize = 10;
pub const DEFAULT_STEP: usize = 1;
pub const DEFAULT_SIGMA: f64 = 3.0;

/// Window geometry.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WindowSpec {
    pub width: usize,
    pub step: usize,
    pub sigma: f64,
}

impl Default for WindowSpec {
    fn default() -> Self {
        WindowSpec { width: DEFAULT_WINDOW, step: DEFAULT_STEP, sigma: DEFAULT_SIGMA }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NetworkTimecourse {
    values: Vec<f64>,
    timepoints: usize,
    networks: usize,
    pub tr_seconds: f64,
    pub names: Vec<String>,
}

impl NetworkTimecourse {
    /// `values` is `timepoints x networks`, row-major (one row per TR).
    pub fn new(values: Vec<f64>, timepoints: usize, networks: usize, tr_seconds: f64) -> Result<Self> {
        ensure!(networks >= 2, "need at least two networks, got {}", networks);
        ensure!(timepoints >= 1, "empty time course");
        ensure!(values.len() == timepoints * networks, "{} values for {}x{} time course", values.len(), timepoints, networks);
        ensure!(tr_seconds > 0.0 && tr_seconds.is_finite(), "TR must be positive, got {}", tr_seconds);
        if let Some(index) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { context: "network time course".into(), index });
        }
        let names = (0..networks).map(|i| format!("net{:02}", i + 1)).collect();
        Ok(NetworkTimecourse { values, timepoints, networks, tr_seconds, names })
    }

    pub fn with_names(mut self, names: Vec<String>) -> Result<Self> {
        ensure!(names.len() == self.networks, "{} names for {} networks", names.len(), self.networks);
        self.names = names;
        Ok(self)
    }

    pub fn timepoints(&self) -> usize {
        self.timepoints
    }

    pub fn networks(&self) -> usize {
        self.networks
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn at(&self, t: usize, n: usize) -> f64 {
        self.values[t * self.networks + n]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TaperWeights {
    weights: Vec<f64>,
    sigma: Option<f64>,
}

impl TaperWeights {
    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn width(&self) -> usize {
        self.weights.len()
    }

    /// Gaussian taper parameter, when the weights came from [`taper_weights`].
    pub fn sigma(&self) -> Option<f64> {
        self.sigma
    }

    /// Arbitrary positive weights, renormalized to sum 1.
    pub fn from_weights(weights: Vec<f64>) -> Result<Self> {
        ensure!(weights.len() >= 2, "window width must be at least 2");
        ensure!(weights.iter().all(|&w| w > 0.0 && w.is_finite()), "taper weights must be positive and finite");
        let total: f64 = weights.iter().sum();
        Ok(TaperWeights { weights: weights.into_iter().map(|w| w / total).collect(), sigma: None })
    }
}

/// Number of windows of width `w` advanced by `s` over `t` samples.
pub fn window_count(t: usize, w: usize, s: usize) -> Result<usize> {
    ensure!(w >= 2, "window width must be at least 2, got {}", w);
    ensure!(s >= 1, "window step must be at least 1");
    ensure!(t >= w, "{} timepoints cannot hold a window of {}", t, w);
    Ok((t - w) / s + 1)
}

/// Rectangle of width `w` convolved with a Gaussian of standard deviation
/// `sigma`, sampled on the window's own `w` positions and normalized to sum 1.
/// `sigma = 0` gives the rectangular window.
pub fn taper_weights(w: usize, sigma: f64) -> Result<TaperWeights> {
    ensure!(w >= 2, "window width must be at least 2, got {}", w);
    ensure!(sigma >= 0.0 && sigma.is_finite(), "taper sigma must be nonnegative, got {}", sigma);
    if sigma == 0.0 {
        return Ok(TaperWeights { weights: vec![1.0 / w as f64; w], sigma: Some(0.0) });
    }
    let two_var = 2.0 * sigma * sigma;
    let raw: Vec<f64> = (0..w)
        .map(|i| (0..w).map(|j| (-((i as f64 - j as f64).powi(2)) / two_var).exp()).sum())
        .collect();
    // mirror-average so the weights are exactly symmetric
    let sym: Vec<f64> = (0..w).map(|i| 0.5 * (raw[i] + raw[w - 1 - i])).collect();
    let mut taper = TaperWeights::from_weights(sym)?;
    taper.sigma = Some(sigma);
    Ok(taper)
}

/// Stack of `W` symmetric `N x N` windowed correlation matrices.
#[derive(Clone, Debug, PartialEq)]
pub struct DfncSequence {
    windows: Vec<f64>,
    n_windows: usize,
    networks: usize,
    pub window_width: usize,
    pub step: usize,
    pub sigma: Option<f64>,
}

impl DfncSequence {
    pub fn from_windows(windows: Vec<f64>, n_windows: usize, networks: usize, window_width: usize, step: usize, sigma: Option<f64>) -> Result<Self> {
        ensure!(windows.len() == n_windows * networks * networks, "{} values for {} windows of {}x{}", windows.len(), n_windows, networks, networks);
        ensure!(n_windows >= 1 && networks >= 1, "empty dFNC sequence");
        if let Some(index) = windows.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { context: "dFNC windows".into(), index });
        }
        Ok(DfncSequence { windows, n_windows, networks, window_width, step, sigma })
    }

    pub fn n_windows(&self) -> usize {
        self.n_windows
    }

    pub fn networks(&self) -> usize {
        self.networks
    }

    pub fn values(&self) -> &[f64] {
        &self.windows
    }

    pub fn window(&self, w: usize) -> &[f64] {
        let nn = self.networks * self.networks;
        &self.windows[w * nn..(w + 1) * nn]
    }

    /// `[W, N, N]` tensor view for the model.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_parts(vec![self.n_windows, self.networks, self.networks], self.windows.clone())
    }

    /// Returns a copy with every window replaced by `f(window_index, matrix)`.
    pub fn map_windows(&self, mut f: impl FnMut(usize, &mut [f64])) -> Self {
        let mut out = self.clone();
        let nn = self.networks * self.networks;
        for (w, chunk) in out.windows.chunks_mut(nn).enumerate() {
            f(w, chunk);
        }
        out
    }

    /// Mean over windows.
    pub fn mean_matrix(&self) -> Vec<f64> {
        let nn = self.networks * self.networks;
        let mut m = vec![0.0; nn];
        for chunk in self.windows.chunks(nn) {
            m.iter_mut().zip(chunk).for_each(|(a, b)| *a += b);
        }
        m.iter_mut().for_each(|v| *v /= self.n_windows as f64);
        m
    }

    /// Symmetry (< 1e-12), unit diagonal, range [-1, 1] and positive
    /// semidefiniteness (smallest eigenvalue >= -1e-8) of every slice.
    pub fn check_invariants(&self) -> Result<()> {
        let n = self.networks;
        for w in 0..self.n_windows {
            let m = self.window(w);
            for i in 0..n {
                ensure!(m[i * n + i] == 1.0, "window {} diagonal {} is {}", w, i, m[i * n + i]);
                for j in 0..n {
                    let v = m[i * n + j];
                    ensure!((-1.0..=1.0).contains(&v), "window {} entry ({}, {}) = {} outside [-1, 1]", w, i, j, v);
                    ensure!((v - m[j * n + i]).abs() < 1e-12, "window {} asymmetric at ({}, {})", w, i, j);
                }
            }
            let min = min_eigenvalue(m, n);
            ensure!(min >= -1e-8, "window {} has eigenvalue {}", w, min);
        }
        Ok(())
    }
}

pub(crate) fn min_eigenvalue(m: &[f64], n: usize) -> f64 {
    let mat = DMatrix::from_row_slice(n, n, m);
    SymmetricEigen::new(mat).eigenvalues.iter().copied().fold(f64::INFINITY, f64::min)
}

/// Convenience wrapper that builds the taper from `spec`.
pub fn dfnc(tc: &NetworkTimecourse, spec: &WindowSpec) -> Result<DfncSequence> {
    windowed_correlation(tc, &taper_weights(spec.width, spec.sigma)?, spec.step)
}

/// Weighted Pearson correlation of each window. Channels with (numerically)
/// zero weighted variance inside a window get correlation 0 with every other
/// channel; the diagonal is always exactly 1.
pub fn windowed_correlation(tc: &NetworkTimecourse, taper: &TaperWeights, step: usize) -> Result<DfncSequence> {
    let w = taper.width();
    let n_windows = window_count(tc.timepoints, w, step)?;
    let n = tc.networks;
    let weights = taper.weights();
    let mut out = vec![0.0; n_windows * n * n];
    let mut centered = vec![0.0; w * n];
    let mut sd = vec![0.0; n];
    for win in 0..n_windows {
        let start = win * step;
        let rows = &tc.values[start * n..(start + w) * n];
        for c in 0..n {
            let mean: f64 = (0..w).map(|k| weights[k] * rows[k * n + c]).sum();
            let scale = (0..w).map(|k| rows[k * n + c].abs()).fold(0.0, f64::max);
            let mut var = 0.0;
            for k in 0..w {
                let d = rows[k * n + c] - mean;
                centered[k * n + c] = d;
                var += weights[k] * d * d;
            }
            let floor = 1e-12 * scale;
            sd[c] = if var.sqrt() > floor && var > 0.0 { var.sqrt() } else { 0.0 };
        }
        let m = &mut out[win * n * n..(win + 1) * n * n];
        for i in 0..n {
            m[i * n + i] = 1.0;
            for j in i + 1..n {
                let r = if sd[i] == 0.0 || sd[j] == 0.0 {
                    0.0
                } else {
                    let cov: f64 = (0..w).map(|k| weights[k] * centered[k * n + i] * centered[k * n + j]).sum();
                    (cov / (sd[i] * sd[j])).clamp(-1.0, 1.0)
                };
                m[i * n + j] = r;
                m[j * n + i] = r;
            }
        }
    }
    DfncSequence::from_windows(out, n_windows, n, w, step, taper.sigma)
}

/// Row-major strict upper triangle of a symmetric `n x n` matrix.
pub fn vectorize_upper(m: &[f64], n: usize) -> Result<Vec<f64>> {
    ensure!(m.len() == n * n, "{} values for a {}x{} matrix", m.len(), n, n);
    let mut v = Vec::with_capacity(n * (n.saturating_sub(1)) / 2);
    for i in 0..n {
        for j in i + 1..n {
            ensure!((m[i * n + j] - m[j * n + i]).abs() <= 1e-9, "matrix asymmetric at ({}, {})", i, j);
            v.push(m[i * n + j]);
        }
    }
    Ok(v)
}

/// Inverse of [`vectorize_upper`]: symmetric matrix with unit diagonal.
pub fn unvectorize_upper(v: &[f64], n: usize) -> Result<Vec<f64>> {
    ensure!(v.len() == n * (n.saturating_sub(1)) / 2, "{} values cannot fill the upper triangle of {}x{}", v.len(), n, n);
    let mut m = vec![0.0; n * n];
    let mut it = v.iter();
    for i in 0..n {
        m[i * n + i] = 1.0;
        for j in i + 1..n {
            let x = *it.next().unwrap();
            m[i * n + j] = x;
            m[j * n + i] = x;
        }
    }
    Ok(m)
}

/// Plain Pearson correlation matrix of the whole time course (static FNC).
pub fn static_fnc(tc: &NetworkTimecourse) -> Result<Vec<f64>> {
    ensure!(tc.timepoints >= 2, "static FNC needs at least two timepoints");
    let taper = taper_weights(tc.timepoints, 0.0)?;
    Ok(windowed_correlation(tc, &taper, 1)?.windows)
}

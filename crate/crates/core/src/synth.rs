//! Synthetic cohorts whose network time courses carry a planted,
//! group-dependent correlation increase in chosen domain blocks.

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{DMatrix, SymmetricEigen};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::dfnc::{static_fnc, DomainPartition, NetworkTimecourse};
use crate::error::{ensure, Error, Result};
use crate::seed;

/// Members of the positive group sharing one effect multiplier.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Subgroup {
    pub name: String,
    pub n_subjects: usize,
    /// Scales the planted effect for this subgroup.
    pub multiplier: f64,
}

/// Alternating correlation states along each time course.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SwitchingConfig {
    /// Mean segment length in timepoints; actual lengths are uniform on
    /// `[len/2, 3len/2]`.
    pub segment_len: usize,
    /// Correlation added between neighbouring domains (in ring order) in the
    /// second state.
    pub contrast: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CohortConfig {
    pub negative_group: String,
    pub n_negative: usize,
    pub positive_group: String,
    pub positive: Vec<Subgroup>,
    pub timepoints: usize,
    pub tr_seconds: f64,
    pub partition: DomainPartition,
    /// Domain pairs receiving the effect, e.g. `["CC", "CC"]`.
    pub planted_blocks: Vec<(String, String)>,
    /// Correlation added inside planted blocks for the positive group.
    pub delta: f64,
    pub within_domain: f64,
    pub across_domain: f64,
    /// Half-width of the seeded uniform perturbation of the base structure.
    pub base_jitter: f64,
    pub base_seed: u64,
    /// Standard deviation of independent per-channel noise added to the
    /// correlated signal.
    pub noise_level: f64,
    pub switching: Option<SwitchingConfig>,
}

impl CohortConfig {
    /// 60 + 60 subjects, T = 60, 16 networks in four domains of four, effect
    /// 0.3 in the CC-CC and VS-VS blocks, two-state switching on.
    pub fn desk() -> Self {
        CohortConfig {
            negative_group: "CN".into(),
            n_negative: 60,
            positive_group: "Asym".into(),
            positive: vec![Subgroup { name: "Asym".into(), n_subjects: 60, multiplier: 1.0 }],
            timepoints: 60,
            tr_seconds: 3.0,
            partition: DomainPartition::from_sizes(&[("SM", 4), ("VS", 4), ("CC", 4), ("DM", 4)]).expect("static partition"),
            planted_blocks: vec![("CC".into(), "CC".into()), ("VS".into(), "VS".into())],
            delta: 0.3,
            within_domain: 0.2,
            across_domain: 0.05,
            base_jitter: 0.05,
            base_seed: 17,
            noise_level: 0.1,
            switching: Some(SwitchingConfig { segment_len: 15, contrast: 0.3 }),
        }
    }

    /// The desk cohort with the positive group split into a weak (0.3x) and
    /// a strong (1.0x) subgroup of 30 each.
    pub fn desk_graded() -> Self {
        let mut c = Self::desk();
        c.positive = vec![
            Subgroup { name: "weak".into(), n_subjects: 30, multiplier: 0.3 },
            Subgroup { name: "strong".into(), n_subjects: 30, multiplier: 1.0 },
        ];
        c
    }

    /// 53 networks in seven domains and T = 255 (246 windows at w = 10).
    pub fn paper_shaped() -> Self {
        let mut c = Self::desk();
        c.partition = DomainPartition::neuromark53();
        c.timepoints = 255;
        c
    }

    pub fn n_networks(&self) -> usize {
        self.partition.n_networks()
    }

    pub fn n_subjects(&self) -> usize {
        self.n_negative + self.positive.iter().map(|s| s.n_subjects).sum::<usize>()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.n_networks();
        ensure!(n >= 2, "cohort needs at least two networks");
        ensure!(self.timepoints >= 2, "cohort needs at least two timepoints");
        ensure!((0.0..=1.0).contains(&self.delta), "effect size {} outside [0, 1]", self.delta);
        ensure!(self.noise_level >= 0.0 && self.base_jitter >= 0.0, "noise and jitter must be nonnegative");
        ensure!(self.tr_seconds > 0.0, "TR must be positive");
        ensure!(!self.positive.is_empty(), "positive group needs at least one subgroup");
        ensure!(self.positive.iter().all(|s| s.multiplier >= 0.0), "subgroup multipliers must be nonnegative");
        for (a, b) in &self.planted_blocks {
            ensure!(
                self.partition.index_of(a).is_some() && self.partition.index_of(b).is_some(),
                "planted block {}-{} names a domain outside the partition {:?}",
                a,
                b,
                self.partition.names()
            );
        }
        if let Some(s) = &self.switching {
            ensure!(s.segment_len >= 2, "switching segments must span at least two timepoints");
        }
        Ok(())
    }

    /// Network index pairs `(i, j)`, `i != j`, inside planted blocks.
    pub fn planted_pairs(&self) -> Vec<(usize, usize)> {
        let mut pairs = Vec::new();
        for (a, b) in &self.planted_blocks {
            let ra = self.partition.range(self.partition.index_of(a).unwrap());
            let rb = self.partition.range(self.partition.index_of(b).unwrap());
            for i in ra.clone() {
                for j in rb.clone() {
                    if i != j {
                        pairs.push((i, j));
                        pairs.push((j, i));
                    }
                }
            }
        }
        pairs.sort_unstable();
        pairs.dedup();
        pairs
    }

    /// Unrepaired target correlation for an effect multiplier and state.
    fn target(&self, multiplier: f64, second_state: bool) -> Vec<f64> {
        let n = self.n_networks();
        let labels = self.partition.labels();
        let d = self.partition.len();
        let mut rng = seed::rng(seed::derive(self.base_seed, &[seed::tag("base")]));
        let mut m = vec![0.0; n * n];
        for i in 0..n {
            m[i * n + i] = 1.0;
            for j in i + 1..n {
                let mut v = if labels[i] == labels[j] { self.within_domain } else { self.across_domain };
                if self.base_jitter > 0.0 {
                    v += rng.random_range(-self.base_jitter..=self.base_jitter);
                }
                if second_state {
                    if let Some(s) = &self.switching {
                        let (a, b) = (labels[i], labels[j]);
                        if d > 1 && (b == (a + 1) % d || a == (b + 1) % d) {
                            v += s.contrast;
                        }
                    }
                }
                m[i * n + j] = v;
                m[j * n + i] = v;
            }
        }
        for (i, j) in self.planted_pairs() {
            m[i * n + j] += multiplier * self.delta;
        }
        m
    }
}

/// Nearest-correlation style repair: clip negative eigenvalues to zero,
/// rescale to unit diagonal. Returns the repaired matrix.
pub fn repair_correlation(m: &[f64], n: usize) -> Result<Vec<f64>> {
    ensure!(m.len() == n * n, "matrix has {} entries, expected {}", m.len(), n * n);
    let a = DMatrix::from_row_slice(n, n, m);
    let a = (&a + a.transpose()) * 0.5;
    let eig = SymmetricEigen::new(a);
    let clipped = eig.eigenvalues.map(|l| l.max(0.0));
    let r = &eig.eigenvectors * DMatrix::from_diagonal(&clipped) * eig.eigenvectors.transpose();
    let scale: Vec<f64> = (0..n).map(|i| r[(i, i)].max(1e-300).sqrt()).collect();
    let mut out = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            out[i * n + j] = if i == j { 1.0 } else { r[(i, j)] / (scale[i] * scale[j]) };
        }
    }
    // symmetrize against rounding in the reconstruction
    for i in 0..n {
        for j in i + 1..n {
            let v = 0.5 * (out[i * n + j] + out[j * n + i]);
            out[i * n + j] = v;
            out[j * n + i] = v;
        }
    }
    Ok(out)
}

/// Square-root factor `F` with `F F^T = corr`, from the eigendecomposition.
fn factor(corr: &[f64], n: usize) -> Vec<f64> {
    let eig = SymmetricEigen::new(DMatrix::from_row_slice(n, n, corr));
    let mut f = vec![0.0; n * n];
    for i in 0..n {
        for k in 0..n {
            f[i * n + k] = eig.eigenvectors[(i, k)] * eig.eigenvalues[k].max(0.0).sqrt();
        }
    }
    f
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSubject {
    pub id: String,
    pub timecourse: NetworkTimecourse,
    /// 1 for the positive group.
    pub label: u8,
    pub group: String,
    pub subgroup: String,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticCohort {
    pub config: CohortConfig,
    pub seed: u64,
    pub subjects: Vec<SyntheticSubject>,
}

impl SyntheticCohort {
    pub fn labels(&self) -> Vec<usize> {
        self.subjects.iter().map(|s| s.label as usize).collect()
    }
}

struct GroupSpec {
    group: String,
    subgroup: String,
    label: u8,
    count: usize,
    /// Factors for state A and (when switching) state B.
    factors: Vec<Vec<f64>>,
}

/// Draws every subject's time course; deterministic in `(config, seed)`.
pub fn generate_cohort(config: &CohortConfig, seed_value: u64) -> Result<SyntheticCohort> {
    config.validate()?;
    let n = config.n_networks();
    let planted = config.planted_pairs();
    let mut specs = vec![GroupSpec {
        group: config.negative_group.clone(),
        subgroup: config.negative_group.clone(),
        label: 0,
        count: config.n_negative,
        factors: Vec::new(),
    }];
    for s in &config.positive {
        specs.push(GroupSpec { group: config.positive_group.clone(), subgroup: s.name.clone(), label: 1, count: s.n_subjects, factors: Vec::new() });
    }
    let multipliers: Vec<f64> = std::iter::once(0.0).chain(config.positive.iter().map(|s| s.multiplier)).collect();
    let states: &[bool] = if config.switching.is_some() { &[false, true] } else { &[false] };
    for (spec, &mult) in specs.iter_mut().zip(&multipliers) {
        for &second in states {
            let target = config.target(mult, second);
            let repaired = repair_correlation(&target, n)?;
            check_planted_shift(config, &planted, &target, &repaired, mult)?;
            spec.factors.push(factor(&repaired, n));
        }
    }

    let mut subjects = Vec::with_capacity(config.n_subjects());
    let mut index = 0usize;
    for spec in &specs {
        for _ in 0..spec.count {
            let subject_seed = seed::derive(seed_value, &[seed::tag("subject"), index as u64]);
            let values = sample_timecourse(config, &spec.factors, n, subject_seed);
            let tc = NetworkTimecourse::new(values, config.timepoints, n, config.tr_seconds)?;
            subjects.push(SyntheticSubject {
                id: format!("sub-{:04}", index + 1),
                timecourse: tc,
                label: spec.label,
                group: spec.group.clone(),
                subgroup: spec.subgroup.clone(),
                seed: subject_seed,
            });
            index += 1;
        }
    }
    Ok(SyntheticCohort { config: config.clone(), seed: seed_value, subjects })
}

fn check_planted_shift(config: &CohortConfig, planted: &[(usize, usize)], target: &[f64], repaired: &[f64], mult: f64) -> Result<()> {
    if planted.is_empty() || mult * config.delta == 0.0 {
        return Ok(());
    }
    let n = config.n_networks();
    let labels = config.partition.labels();
    let names = config.partition.names();
    let mut worst: Option<(f64, String)> = None;
    for &(i, j) in planted {
        let shift = (repaired[i * n + j] - target[i * n + j]).abs();
        if worst.as_ref().is_none_or(|(s, _)| shift > *s) {
            worst = Some((shift, format!("{}-{}", names[labels[i]], names[labels[j]])));
        }
    }
    let (shift, block) = worst.unwrap();
    let delta = mult * config.delta;
    if shift > delta / 2.0 {
        return Err(Error::InfeasibleEffect { delta, block, shift });
    }
    Ok(())
}

fn sample_timecourse(config: &CohortConfig, factors: &[Vec<f64>], n: usize, subject_seed: u64) -> Vec<f64> {
    let mut rng = seed::rng(subject_seed);
    let t_len = config.timepoints;
    let mut state_of = vec![0usize; t_len];
    if let Some(s) = &config.switching {
        let mut state = rng.random_range(0..2usize);
        let mut t = 0;
        while t < t_len {
            let len = rng.random_range(s.segment_len / 2..=s.segment_len + s.segment_len / 2).max(1);
            for st in state_of.iter_mut().skip(t).take(len) {
                *st = state;
            }
            t += len;
            state = 1 - state;
        }
    }
    let mut values = vec![0.0; t_len * n];
    let mut z = vec![0.0; n];
    for t in 0..t_len {
        for v in z.iter_mut() {
            *v = rng.sample(StandardNormal);
        }
        let f = &factors[state_of[t]];
        for i in 0..n {
            let signal: f64 = f[i * n..(i + 1) * n].iter().zip(&z).map(|(a, b)| a * b).sum();
            let noise: f64 = rng.sample(StandardNormal);
            values[t * n + i] = signal + config.noise_level * noise;
        }
    }
    values
}

/// Difference of group-mean static FNC per domain block (positive minus
/// negative), with its standard error. Diagonal blocks use off-diagonal
/// entries only.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EffectTable {
    pub domains: Vec<String>,
    /// `D x D`, row-major.
    pub effect: Vec<f64>,
    pub std_error: Vec<f64>,
}

impl EffectTable {
    pub fn get(&self, a: &str, b: &str) -> Option<f64> {
        let d = self.domains.len();
        let i = self.domains.iter().position(|x| x == a)?;
        let j = self.domains.iter().position(|x| x == b)?;
        Some(self.effect[i * d + j])
    }
}

pub fn verify_planted_effect(cohort: &SyntheticCohort, partition: &DomainPartition) -> Result<EffectTable> {
    ensure!(!cohort.subjects.is_empty(), "cohort is empty");
    let n = partition.n_networks();
    let d = partition.len();
    let ranges = partition.ranges();
    let mut per_group: [Vec<Vec<f64>>; 2] = [Vec::new(), Vec::new()];
    for s in &cohort.subjects {
        ensure!(s.timecourse.networks() == n, "subject {} has {} networks, partition covers {}", s.id, s.timecourse.networks(), n);
        let fnc = static_fnc(&s.timecourse)?;
        let mut blocks = vec![0.0; d * d];
        for (a, ra) in ranges.iter().enumerate() {
            for (b, rb) in ranges.iter().enumerate() {
                let (mut sum, mut count) = (0.0, 0usize);
                for i in ra.clone() {
                    for j in rb.clone() {
                        if i != j {
                            sum += fnc[i * n + j];
                            count += 1;
                        }
                    }
                }
                blocks[a * d + b] = if count > 0 { sum / count as f64 } else { 0.0 };
            }
        }
        per_group[s.label.min(1) as usize].push(blocks);
    }
    let stats = |g: &[Vec<f64>], k: usize| -> (f64, f64) {
        if g.is_empty() {
            return (0.0, 0.0);
        }
        let m = g.iter().map(|b| b[k]).sum::<f64>() / g.len() as f64;
        let var = if g.len() > 1 { g.iter().map(|b| (b[k] - m).powi(2)).sum::<f64>() / (g.len() - 1) as f64 } else { 0.0 };
        (m, var / g.len() as f64)
    };
    let mut effect = vec![0.0; d * d];
    let mut std_error = vec![0.0; d * d];
    for k in 0..d * d {
        let (m0, v0) = stats(&per_group[0], k);
        let (m1, v1) = stats(&per_group[1], k);
        effect[k] = m1 - m0;
        std_error[k] = (v0 + v1).sqrt();
    }
    Ok(EffectTable { domains: partition.names().iter().map(|s| s.to_string()).collect(), effect, std_error })
}

/// `subject_id,group,subgroup,seed` rows.
pub fn labels_csv(cohort: &SyntheticCohort) -> String {
    let mut out = String::from("subject_id,group,subgroup,seed\n");
    for s in &cohort.subjects {
        let _ = writeln!(out, "{},{},{},{}", s.id, s.group, s.subgroup, s.seed);
    }
    out
}

pub fn write_labels_csv(path: &Path, cohort: &SyntheticCohort) -> Result<()> {
    std::fs::write(path, labels_csv(cohort)).map_err(|e| Error::io(path, e))
}

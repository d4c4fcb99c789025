//! Classification metrics, the paired t-test across folds, and per-group
//! mean output scores.

use serde::{Deserialize, Serialize};

use crate::dfnc::DfncSequence;
use crate::error::{ensure, Error, Result};
use crate::model::{Model, ModelParams};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    pub fn_: usize,
}

impl ConfusionCounts {
    pub fn total(&self) -> usize {
        self.tp + self.fp + self.tn + self.fn_
    }

    pub fn positives(&self) -> usize {
        self.tp + self.fn_
    }

    pub fn negatives(&self) -> usize {
        self.tn + self.fp
    }
}

/// Counts with class 1 as the positive class.
pub fn confusion_counts(labels: &[u8], predictions: &[u8]) -> Result<ConfusionCounts> {
    ensure!(
        labels.len() == predictions.len(),
        "{} labels but {} predictions",
        labels.len(),
        predictions.len()
    );
    let mut c = ConfusionCounts::default();
    for (i, (&y, &p)) in labels.iter().zip(predictions).enumerate() {
        ensure!(y <= 1 && p <= 1, "entry {} is not binary: label {}, prediction {}", i, y, p);
        match (y, p) {
            (1, 1) => c.tp += 1,
            (0, 1) => c.fp += 1,
            (0, 0) => c.tn += 1,
            _ => c.fn_ += 1,
        }
    }
    Ok(c)
}

/// Percentages in `[0, 100]`, rounded to two decimals.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub accuracy: f64,
    pub f1: f64,
    pub precision: f64,
    pub specificity: f64,
    pub sensitivity: f64,
}

impl MetricsRecord {
    /// Mean of sensitivity and specificity, as a fraction in `[0, 1]`.
    pub fn balanced_accuracy(&self) -> f64 {
        (self.sensitivity + self.specificity) / 200.0
    }

    /// Values in `fold,acc,f1,precision,spec,sens` column order.
    pub fn columns(&self) -> [f64; 5] {
        [self.accuracy, self.f1, self.precision, self.specificity, self.sensitivity]
    }
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

fn percent(x: f64) -> f64 {
    (x * 10000.0).round() / 100.0
}

/// Undefined ratios (no predicted or no actual positives) are reported as 0.
pub fn classification_metrics(c: &ConfusionCounts) -> Result<MetricsRecord> {
    ensure!(c.total() > 0, "metrics need at least one subject");
    let precision = ratio(c.tp, c.tp + c.fp);
    let sensitivity = ratio(c.tp, c.tp + c.fn_);
    let f1 = if precision + sensitivity > 0.0 { 2.0 * precision * sensitivity / (precision + sensitivity) } else { 0.0 };
    Ok(MetricsRecord {
        accuracy: percent(ratio(c.tp + c.tn, c.total())),
        f1: percent(f1),
        precision: percent(precision),
        specificity: percent(ratio(c.tn, c.tn + c.fp)),
        sensitivity: percent(sensitivity),
    })
}

/// Result of a paired t-test. When the differences have zero variance and a
/// nonzero mean, `t` is a signed infinity, `p` is 0 and `zero_variance` is set.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TTest {
    pub t: f64,
    pub p: f64,
    pub df: usize,
    pub zero_variance: bool,
}

pub fn paired_ttest(a: &[f64], b: &[f64]) -> Result<TTest> {
    ensure!(a.len() == b.len(), "paired samples differ in length: {} vs {}", a.len(), b.len());
    ensure!(a.len() >= 2, "paired t-test needs at least two pairs, got {}", a.len());
    ensure!(a.iter().chain(b).all(|v| v.is_finite()), "paired t-test input is not finite");
    let n = a.len() as f64;
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let mean = d.iter().sum::<f64>() / n;
    let var = d.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    let df = a.len() - 1;
    if var == 0.0 {
        return Ok(if mean == 0.0 {
            TTest { t: 0.0, p: 1.0, df, zero_variance: true }
        } else {
            TTest { t: f64::INFINITY.copysign(mean), p: 0.0, df, zero_variance: true }
        });
    }
    let t = mean / (var / n).sqrt();
    Ok(TTest { t, p: student_t_two_sided(t, df as f64), df, zero_variance: false })
}

/// Two-sided tail probability of Student's t with `nu` degrees of freedom.
pub fn student_t_two_sided(t: f64, nu: f64) -> f64 {
    if !t.is_finite() {
        return 0.0;
    }
    let x = nu / (nu + t * t);
    regularized_incomplete_beta(x, nu / 2.0, 0.5).clamp(0.0, 1.0)
}

/// `I_x(a, b)` by the continued fraction, using the symmetry relation on
/// whichever side converges fast.
pub fn regularized_incomplete_beta(x: f64, a: f64, b: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    if x >= 1.0 {
        return 1.0;
    }
    let ln_front = ln_gamma(a + b) - ln_gamma(a) - ln_gamma(b) + a * x.ln() + b * (1.0 - x).ln();
    let front = ln_front.exp();
    if x < (a + 1.0) / (a + b + 2.0) {
        front * beta_continued_fraction(x, a, b) / a
    } else {
        1.0 - front * beta_continued_fraction(1.0 - x, b, a) / b
    }
}

// Modified Lentz evaluation.
fn beta_continued_fraction(x: f64, a: f64, b: f64) -> f64 {
    const TINY: f64 = 1e-300;
    let mut c = 1.0;
    let mut d = 1.0 - (a + b) * x / (a + 1.0);
    if d.abs() < TINY {
        d = TINY;
    }
    d = 1.0 / d;
    let mut h = d;
    for m in 1..=500 {
        let m = m as f64;
        let m2 = 2.0 * m;
        let aa = m * (b - m) * x / ((a + m2 - 1.0) * (a + m2));
        for coef in [aa, -(a + m) * (a + b + m) * x / ((a + m2) * (a + m2 + 1.0))] {
            d = 1.0 + coef * d;
            if d.abs() < TINY {
                d = TINY;
            }
            c = 1.0 + coef / c;
            if c.abs() < TINY {
                c = TINY;
            }
            d = 1.0 / d;
            h *= d * c;
        }
        if (d * c - 1.0).abs() < 1e-16 {
            break;
        }
    }
    h
}

/// Lanczos approximation (g = 7, 9 terms).
pub fn ln_gamma(x: f64) -> f64 {
    const COEF: [f64; 9] = [
        0.999_999_999_999_809_9,
        676.520_368_121_885_1,
        -1_259.139_216_722_402_8,
        771.323_428_777_653_1,
        -176.615_029_162_140_6,
        12.507_343_278_686_905,
        -0.138_571_095_265_720_12,
        9.984_369_578_019_572e-6,
        1.505_632_735_149_311_6e-7,
    ];
    if x < 0.5 {
        let pi = std::f64::consts::PI;
        return (pi / (pi * x).sin()).ln() - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let mut acc = COEF[0];
    for (i, &c) in COEF.iter().enumerate().skip(1) {
        acc += c / (x + i as f64);
    }
    let t = x + 7.5;
    0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + acc.ln()
}

/// Mean output score per declared group.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupScoreReport {
    pub groups: Vec<GroupScore>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupScore {
    pub name: String,
    pub mean_score: f64,
    pub size: usize,
}

impl GroupScoreReport {
    pub fn get(&self, name: &str) -> Option<&GroupScore> {
        self.groups.iter().find(|g| g.name == name)
    }
}

/// Averages precomputed scores by tag, in the order of `declared`.
pub fn mean_scores_by_group(scores: &[f64], tags: &[&str], declared: &[&str]) -> Result<GroupScoreReport> {
    ensure!(scores.len() == tags.len(), "{} scores but {} group tags", scores.len(), tags.len());
    let mut groups = Vec::with_capacity(declared.len());
    for &name in declared {
        let members: Vec<f64> = scores.iter().zip(tags).filter(|(_, t)| **t == name).map(|(s, _)| *s).collect();
        if members.is_empty() {
            return Err(Error::EmptyGroup(name.to_string()));
        }
        groups.push(GroupScore { name: name.to_string(), mean_score: members.iter().sum::<f64>() / members.len() as f64, size: members.len() });
    }
    Ok(GroupScoreReport { groups })
}

/// Scores every subject with a binary model and averages by group tag.
pub fn group_mean_scores(model: &Model, params: &ModelParams, subjects: &[(&DfncSequence, &str)], declared: &[&str]) -> Result<GroupScoreReport> {
    ensure!(!subjects.is_empty(), "no subjects to score");
    let inputs: Vec<&DfncSequence> = subjects.iter().map(|(s, _)| *s).collect();
    let mut scores = Vec::with_capacity(inputs.len());
    for chunk in inputs.chunks(32) {
        scores.extend(model.scores(params, chunk)?);
    }
    let tags: Vec<&str> = subjects.iter().map(|(_, t)| *t).collect();
    mean_scores_by_group(&scores, &tags, declared)
}

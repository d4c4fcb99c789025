//! Metrics tables, SVG heatmaps and the run directory with its manifest.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use stdfnc::dfnc::DomainPartition;
use stdfnc::eval::MetricsRecord;

use crate::error::{CliError, Result};

pub const METRICS_HEADER: &str = "fold,acc,f1,precision,spec,sens";

/// Sample standard deviation; 0 for a single value.
fn sd(values: &[f64]) -> f64 {
    if values.len() < 2 {
        return 0.0;
    }
    let m = values.iter().sum::<f64>() / values.len() as f64;
    (values.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (values.len() - 1) as f64).sqrt()
}

/// Folds are numbered from 1; the last two rows are the column means and
/// sample standard deviations.
pub fn metrics_csv(records: &[MetricsRecord]) -> Result<String> {
    if records.is_empty() {
        return Err(CliError::Config("metrics table needs at least one fold".into()));
    }
    let mut s = String::from(METRICS_HEADER);
    s.push('\n');
    let row = |s: &mut String, label: &str, cols: [f64; 5]| {
        let _ = writeln!(s, "{label},{:.2},{:.2},{:.2},{:.2},{:.2}", cols[0], cols[1], cols[2], cols[3], cols[4]);
    };
    for (i, r) in records.iter().enumerate() {
        row(&mut s, &(i + 1).to_string(), r.columns());
    }
    let column = |k: usize| records.iter().map(|r| r.columns()[k]).collect::<Vec<_>>();
    let mean: [f64; 5] = std::array::from_fn(|k| column(k).iter().sum::<f64>() / records.len() as f64);
    let sds: [f64; 5] = std::array::from_fn(|k| sd(&column(k)));
    row(&mut s, "mean", mean);
    row(&mut s, "sd", sds);
    Ok(s)
}

pub fn emit_metrics_csv(records: &[MetricsRecord], path: &Path) -> Result<()> {
    fs::write(path, metrics_csv(records)?).map_err(|e| CliError::io(path, e))
}

/// Fold rows of a metrics CSV (the mean and sd rows are skipped).
pub fn read_metrics_csv(path: &Path) -> Result<Vec<[f64; 5]>> {
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    let mut lines = text.lines();
    if lines.next() != Some(METRICS_HEADER) {
        return Err(CliError::format(path, format!("header is not `{METRICS_HEADER}`")));
    }
    let mut rows = Vec::new();
    for line in lines {
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 6 {
            return Err(CliError::format(path, format!("row `{line}` does not have 6 fields")));
        }
        if fields[0] == "mean" || fields[0] == "sd" {
            continue;
        }
        let mut cols = [0.0; 5];
        for (c, f) in cols.iter_mut().zip(&fields[1..]) {
            *c = f.parse().map_err(|_| CliError::format(path, format!("`{f}` is not a number")))?;
        }
        rows.push(cols);
    }
    Ok(rows)
}

const BLUE: [f64; 3] = [33.0, 102.0, 172.0];
const RED: [f64; 3] = [178.0, 24.0, 43.0];

/// Diverging blue-white-red color for `value` on `[-bound, bound]`; values
/// outside are clipped.
pub fn diverging_color(value: f64, bound: f64) -> [u8; 3] {
    let t = (value / bound).clamp(-1.0, 1.0);
    let end = if t < 0.0 { BLUE } else { RED };
    let a = t.abs();
    std::array::from_fn(|k| (255.0 + a * (end[k] - 255.0)).round() as u8)
}

fn css(c: [u8; 3]) -> String {
    format!("#{:02x}{:02x}{:02x}", c[0], c[1], c[2])
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Heatmap of a row-major `n x n` matrix with domain boundaries, labels on
/// both axes and a color bar spanning `[-bound, bound]`.
pub fn heatmap_svg(matrix: &[f64], n: usize, partition: &DomainPartition, bound: f64, title: &str) -> Result<String> {
    if n == 0 || matrix.len() != n * n {
        return Err(stdfnc::Error::Contract(format!("heatmap needs a square matrix, got {} values for n = {n}", matrix.len())).into());
    }
    partition.check_covers(n)?;
    if !(bound > 0.0 && bound.is_finite()) {
        return Err(stdfnc::Error::Contract(format!("color bound must be positive, got {bound}")).into());
    }
    let cell = (400.0 / n as f64).clamp(4.0, 40.0);
    let side = cell * n as f64;
    let (left, top) = (70.0, 40.0);
    let bar_x = left + side + 30.0;
    let width = bar_x + 70.0;
    let height = top + side + 60.0;

    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width:.0}" height="{height:.0}" viewBox="0 0 {width:.0} {height:.0}" font-family="sans-serif" font-size="11">"#);
    let _ = writeln!(s, r#"<text x="{left}" y="20" font-size="13">{}</text>"#, escape(title));
    let _ = writeln!(s, r#"<g class="cells">"#);
    for i in 0..n {
        for j in 0..n {
            let v = matrix[i * n + j];
            let _ = writeln!(
                s,
                r#"<rect class="cell" x="{:.2}" y="{:.2}" width="{cell:.2}" height="{cell:.2}" fill="{}" data-value="{v:e}"/>"#,
                left + j as f64 * cell,
                top + i as f64 * cell,
                css(diverging_color(v, bound))
            );
        }
    }
    let _ = writeln!(s, "</g>");

    let _ = writeln!(s, r#"<g class="domains" stroke="black" stroke-width="1">"#);
    for r in partition.ranges().iter().skip(1) {
        let p = r.start as f64 * cell;
        let _ = writeln!(s, r#"<line x1="{:.2}" y1="{top}" x2="{:.2}" y2="{:.2}"/>"#, left + p, left + p, top + side);
        let _ = writeln!(s, r#"<line x1="{left}" y1="{:.2}" x2="{:.2}" y2="{:.2}"/>"#, top + p, left + side, top + p);
    }
    let _ = writeln!(s, r#"<rect x="{left}" y="{top}" width="{side:.2}" height="{side:.2}" fill="none"/>"#);
    let _ = writeln!(s, "</g>");

    let _ = writeln!(s, r#"<g class="labels">"#);
    for (d, r) in partition.domains().iter().zip(partition.ranges()) {
        let mid = (r.start + r.end) as f64 / 2.0 * cell;
        let name = escape(&d.name);
        let _ = writeln!(s, r#"<text x="{:.2}" y="{:.2}" text-anchor="end" dominant-baseline="middle">{name}</text>"#, left - 6.0, top + mid);
        let _ = writeln!(s, r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">{name}</text>"#, left + mid, top + side + 16.0);
    }
    let _ = writeln!(s, "</g>");

    let _ = writeln!(s, r#"<defs><linearGradient id="bar" x1="0" y1="1" x2="0" y2="0">"#);
    for (offset, v) in [(0.0, -bound), (0.5, 0.0), (1.0, bound)] {
        let _ = writeln!(s, r#"<stop offset="{offset}" stop-color="{}"/>"#, css(diverging_color(v, bound)));
    }
    let _ = writeln!(s, "</linearGradient></defs>");
    let _ = writeln!(s, r#"<g class="colorbar"><rect x="{bar_x:.2}" y="{top}" width="14" height="{side:.2}" fill="url(#bar)" stroke="black"/>"#);
    for (y, v) in [(top, bound), (top + side / 2.0, 0.0), (top + side, -bound)] {
        let _ = writeln!(s, r#"<text x="{:.2}" y="{y:.2}" dominant-baseline="middle">{v:.2}</text>"#, bar_x + 18.0);
    }
    let _ = writeln!(s, "</g>");
    s.push_str("</svg>\n");
    Ok(s)
}

pub fn emit_heatmap_svg(matrix: &[f64], n: usize, partition: &DomainPartition, bound: f64, title: &str, path: &Path) -> Result<()> {
    fs::write(path, heatmap_svg(matrix, n, partition, bound, title)?).map_err(|e| CliError::io(path, e))
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    /// `ok`, `failed` or `skipped`.
    pub status: String,
    pub outputs: Vec<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub stages: BTreeMap<String, StageRecord>,
    pub seeds: BTreeMap<String, u64>,
    /// Seconds since the Unix epoch of the last update.
    pub updated_unix: u64,
}

/// The only writer of a run directory. Every file goes through it and is
/// listed in `manifest.json` under the stage that produced it.
pub struct RunDir {
    root: PathBuf,
    manifest: RunManifest,
}

pub const MANIFEST_FILE: &str = "manifest.json";

impl RunDir {
    /// Opens `root`, keeping the records of stages run earlier.
    pub fn open(root: &Path) -> Result<Self> {
        fs::create_dir_all(root).map_err(|e| CliError::io(root, e))?;
        let path = root.join(MANIFEST_FILE);
        let manifest = if path.exists() {
            let text = fs::read_to_string(&path).map_err(|e| CliError::io(&path, e))?;
            serde_json::from_str(&text).map_err(|e| CliError::format(&path, e.to_string()))?
        } else {
            RunManifest::default()
        };
        Ok(RunDir { root: root.to_path_buf(), manifest })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    pub fn manifest(&self) -> &RunManifest {
        &self.manifest
    }

    /// Forgets the outputs of `stage` and marks it running.
    pub fn begin(&mut self, stage: &str) {
        self.manifest.stages.insert(stage.to_string(), StageRecord { status: "running".into(), outputs: Vec::new(), error: None });
    }

    pub fn finish(&mut self, stage: &str, outcome: std::result::Result<(), &CliError>) -> Result<()> {
        let rec = self.manifest.stages.entry(stage.to_string()).or_default();
        match outcome {
            Ok(()) => rec.status = "ok".into(),
            Err(e) => {
                rec.status = "failed".into();
                rec.error = Some(e.to_string());
            }
        }
        self.flush()
    }

    pub fn skip(&mut self, stage: &str) -> Result<()> {
        self.manifest.stages.insert(stage.to_string(), StageRecord { status: "skipped".into(), outputs: Vec::new(), error: None });
        self.flush()
    }

    pub fn set_seed(&mut self, name: &str, seed: u64) {
        self.manifest.seeds.insert(name.to_string(), seed);
    }

    /// Records a file already written under the run directory.
    pub fn record(&mut self, stage: &str, rel: &str) {
        let rec = self.manifest.stages.entry(stage.to_string()).or_default();
        if !rec.outputs.iter().any(|o| o == rel) {
            rec.outputs.push(rel.to_string());
        }
    }

    pub fn write(&mut self, stage: &str, rel: &str, bytes: impl AsRef<[u8]>) -> Result<()> {
        let path = self.prepare(rel)?;
        fs::write(&path, bytes).map_err(|e| CliError::io(&path, e))?;
        self.record(stage, rel);
        Ok(())
    }

    pub fn write_json<T: Serialize>(&mut self, stage: &str, rel: &str, value: &T) -> Result<()> {
        let mut text = serde_json::to_string_pretty(value).map_err(|e| CliError::Config(e.to_string()))?;
        text.push('\n');
        self.write(stage, rel, text)
    }

    /// Creates the parent directories of `rel` and returns its full path.
    pub fn prepare(&self, rel: &str) -> Result<PathBuf> {
        let path = self.root.join(rel);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(|e| CliError::io(parent, e))?;
        }
        Ok(path)
    }

    pub fn flush(&mut self) -> Result<()> {
        self.manifest.updated_unix = std::time::SystemTime::now().duration_since(std::time::UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0);
        let path = self.root.join(MANIFEST_FILE);
        let mut text = serde_json::to_string_pretty(&self.manifest).map_err(|e| CliError::Config(e.to_string()))?;
        text.push('\n');
        fs::write(&path, text).map_err(|e| CliError::io(&path, e))
    }
}

//! File formats for time courses and dFNC stacks.
//!
//! * Time course CSV: header row of network names, then one row per TR.
//! * Time course binary: little-endian `f64`, `T*N` values (row = TR), with a
//!   JSON sidecar `{T, N, tr_seconds, network_names}` next to it.
//! * dFNC binary: little-endian `f64`, `W*N*N` values window-major, with a
//!   JSON sidecar `{W, N, w, s, sigma}`.
//!
//! Sidecars live at the data path with its extension replaced by `.json`.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{DfncSequence, NetworkTimecourse};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TimecourseSidecar {
    #[serde(rename = "T")]
    pub t: usize,
    #[serde(rename = "N")]
    pub n: usize,
    pub tr_seconds: f64,
    pub network_names: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DfncSidecar {
    #[serde(rename = "W")]
    pub n_windows: usize,
    #[serde(rename = "N")]
    pub n: usize,
    pub w: usize,
    pub s: usize,
    /// `null` for custom (non-Gaussian) tapers.
    pub sigma: Option<f64>,
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    path.with_extension("json")
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn f64s_from_le(path: &Path, bytes: &[u8], expected: usize) -> Result<Vec<f64>> {
    if bytes.len() != expected * 8 {
        return Err(Error::format(path, format!("expected {} bytes, found {}", expected * 8, bytes.len())));
    }
    Ok(bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
}

fn f64s_to_le(values: &[f64]) -> Vec<u8> {
    values.iter().flat_map(|v| v.to_le_bytes()).collect()
}

pub fn read_timecourse_csv(path: &Path, tr_seconds: f64) -> Result<NetworkTimecourse> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let header = lines.next().ok_or_else(|| Error::format(path, "empty file"))?;
    let names: Vec<String> = header.split(',').map(|s| s.trim().to_string()).collect();
    let mut values = Vec::new();
    let mut rows = 0;
    for (i, line) in lines.enumerate() {
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != names.len() {
            return Err(Error::format(path, format!("row {} has {} fields, header has {}", i + 2, fields.len(), names.len())));
        }
        for f in fields {
            let v: f64 = f.trim().parse().map_err(|_| Error::format(path, format!("row {}: `{}` is not a number", i + 2, f.trim())))?;
            values.push(v);
        }
        rows += 1;
    }
    NetworkTimecourse::new(values, rows, names.len(), tr_seconds)?.with_names(names)
}

pub fn write_timecourse_csv(path: &Path, tc: &NetworkTimecourse) -> Result<()> {
    let mut s = tc.names.join(",");
    s.push('\n');
    for row in tc.values().chunks(tc.networks()) {
        let fields: Vec<String> = row.iter().map(|v| format!("{:?}", v)).collect();
        s.push_str(&fields.join(","));
        s.push('\n');
    }
    write(path, s.as_bytes())
}

pub fn read_timecourse_bin(path: &Path) -> Result<NetworkTimecourse> {
    let side_path = sidecar_path(path);
    let side: TimecourseSidecar = serde_json::from_slice(&read(&side_path)?).map_err(|e| Error::format(&side_path, e.to_string()))?;
    let values = f64s_from_le(path, &read(path)?, side.t * side.n)?;
    NetworkTimecourse::new(values, side.t, side.n, side.tr_seconds)?.with_names(side.network_names)
}

pub fn write_timecourse_bin(path: &Path, tc: &NetworkTimecourse) -> Result<()> {
    let side = TimecourseSidecar { t: tc.timepoints(), n: tc.networks(), tr_seconds: tc.tr_seconds, network_names: tc.names.clone() };
    write(path, &f64s_to_le(tc.values()))?;
    write(&sidecar_path(path), serde_json::to_string_pretty(&side)?.as_bytes())
}

/// Dispatches on the extension: `.csv` is text, anything else binary.
pub fn read_timecourse(path: &Path, tr_seconds: f64) -> Result<NetworkTimecourse> {
    match path.extension().and_then(|e| e.to_str()) {
        Some(ext) if ext.eq_ignore_ascii_case("csv") => read_timecourse_csv(path, tr_seconds),
        _ => read_timecourse_bin(path),
    }
}

pub fn write_dfnc_bin(path: &Path, seq: &DfncSequence) -> Result<()> {
    let side = DfncSidecar { n_windows: seq.n_windows(), n: seq.networks(), w: seq.window_width, s: seq.step, sigma: seq.sigma };
    write(path, &f64s_to_le(seq.values()))?;
    write(&sidecar_path(path), serde_json::to_string_pretty(&side)?.as_bytes())
}

pub fn read_dfnc_bin(path: &Path) -> Result<DfncSequence> {
    let side_path = sidecar_path(path);
    let side: DfncSidecar = serde_json::from_slice(&read(&side_path)?).map_err(|e| Error::format(&side_path, e.to_string()))?;
    let values = f64s_from_le(path, &read(path)?, side.n_windows * side.n * side.n)?;
    DfncSequence::from_windows(values, side.n_windows, side.n, side.w, side.s, side.sigma)
}

// SPDX-License-Identifier: MIT OR Apache-2.0

//! CSV input, JSON output and run manifests.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use varseg_core::{DetectionResult, PiecewiseVarModel, TimeSeries};

use crate::CliError;

/// Version of every JSON document written by this tool.
pub const SCHEMA_VERSION: u32 = 1;

/// Reads a comma-separated numeric matrix, one row per time point. A first
/// row that does not parse as numbers is taken as a header.
pub fn load_csv(path: &Path) -> Result<TimeSeries, CliError> {
    let bytes = fs::read(path).map_err(|e| CliError::io(path, e))?;
    parse_csv(&bytes).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))
}

pub fn parse_csv(bytes: &[u8]) -> Result<TimeSeries, String> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(bytes);
    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut width = None;
    for (i, record) in reader.records().enumerate() {
        let record = record.map_err(|e| format!("row {}: {e}", i + 1))?;
        if record.iter().all(str::is_empty) {
            continue;
        }
        let parsed: Vec<Result<f64, _>> = record.iter().map(str::parse::<f64>).collect();
        if i == 0 && parsed.iter().any(Result::is_err) {
            continue;
        }
        let mut row = Vec::with_capacity(parsed.len());
        for (j, v) in parsed.into_iter().enumerate() {
            match v {
                Ok(x) if x.is_finite() => row.push(x),
                _ => {
                    return Err(format!(
                        "row {}, column {}: not a finite number: {:?}",
                        i + 1,
                        j + 1,
                        &record[j]
                    ))
                }
            }
        }
        match width {
            None => width = Some(row.len()),
            Some(w) if w != row.len() => {
                return Err(format!("row {}: {} columns, expected {w}", i + 1, row.len()))
            }
            _ => {}
        }
        rows.push(row);
    }
    if rows.is_empty() {
        return Err("no data rows".into());
    }
    TimeSeries::from_rows(&rows).map_err(|e| e.to_string())
}

/// Writes `data` with full round-trip precision.
pub fn save_csv(data: &TimeSeries, path: &Path) -> Result<(), CliError> {
    let mut out = Vec::new();
    {
        let mut w = csv::Writer::from_writer(&mut out);
        let m = data.values();
        for i in 0..m.nrows() {
            w.write_record(m.row(i).iter().map(|v| v.to_string()))
                .map_err(|e| CliError::Runtime(e.to_string()))?;
        }
        w.flush().map_err(|e| CliError::io(path, e))?;
    }
    write_atomic(path, &out)
}

/// Writes through a temporary sibling and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    let name = path
        .file_name()
        .ok_or_else(|| CliError::Runtime(format!("{}: not a file path", path.display())))?;
    let mut tmp_name = std::ffi::OsString::from(".");
    tmp_name.push(name);
    tmp_name.push(format!(".tmp{}", std::process::id()));
    let tmp = path.with_file_name(tmp_name);
    let result = (|| {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    })();
    if let Err(e) = result {
        let _ = fs::remove_file(&tmp);
        return Err(CliError::io(path, e));
    }
    Ok(())
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// What was run, on which input, with which settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    /// Every effective setting, flags and config file merged.
    pub config: BTreeMap<String, String>,
    /// SHA-256 of the input file bytes.
    pub input_digest: Option<String>,
    pub seed: Option<u64>,
    pub started: String,
    pub finished: String,
    pub tool_version: String,
}

impl RunManifest {
    pub fn new(command: &str, config: BTreeMap<String, String>) -> Self {
        let now = timestamp();
        Self {
            command: command.to_string(),
            config,
            input_digest: None,
            seed: None,
            started: now.clone(),
            finished: now,
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
        }
    }

    pub fn finish(&mut self) {
        self.finished = timestamp();
    }

    /// SHA-256 of the manifest's JSON form.
    pub fn digest(&self) -> String {
        sha256_hex(&serde_json::to_vec(self).expect("manifest serializes"))
    }
}

fn timestamp() -> String {
    chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Millis, true)
}

type Rows = Vec<Vec<f64>>;

fn to_rows(m: &DMatrix<f64>) -> Rows {
    (0..m.nrows()).map(|i| m.row(i).iter().copied().collect()).collect()
}

fn from_rows(rows: &Rows) -> Result<DMatrix<f64>, String> {
    let r = rows.len();
    let c = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|row| row.len() != c) {
        return Err("ragged matrix".into());
    }
    Ok(DMatrix::from_fn(r, c, |i, j| rows[i][j]))
}

/// Serialized [`DetectionResult`]; matrices are row-major nested arrays.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultDocument {
    pub schema_version: u32,
    pub change_points: Vec<usize>,
    pub lag: usize,
    pub sparse_mats: Vec<Rows>,
    pub lowrank_mats: Option<Vec<Rows>>,
    pub elapsed_seconds: f64,
    pub manifest: RunManifest,
}

impl ResultDocument {
    pub fn new(result: &DetectionResult, manifest: RunManifest) -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            change_points: result.change_points.clone(),
            lag: result.lag,
            sparse_mats: result.sparse_mats.iter().map(to_rows).collect(),
            lowrank_mats: result
                .lowrank_mats
                .as_ref()
                .map(|v| v.iter().map(to_rows).collect()),
            elapsed_seconds: result.elapsed_seconds,
            manifest,
        }
    }

    pub fn result(&self) -> Result<DetectionResult, String> {
        let sparse = self.sparse_mats.iter().map(from_rows).collect::<Result<_, _>>()?;
        let lowrank = match &self.lowrank_mats {
            Some(v) => Some(v.iter().map(from_rows).collect::<Result<_, _>>()?),
            None => None,
        };
        Ok(DetectionResult {
            change_points: self.change_points.clone(),
            sparse_mats: sparse,
            lowrank_mats: lowrank,
            lag: self.lag,
            elapsed_seconds: self.elapsed_seconds,
        })
    }
}

pub fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<(), CliError> {
    let mut bytes = serde_json::to_vec_pretty(value).map_err(|e| CliError::Runtime(e.to_string()))?;
    bytes.push(b'\n');
    write_atomic(path, &bytes)
}

/// Writes the result document and returns it.
pub fn save_result(
    result: &DetectionResult,
    manifest: RunManifest,
    path: &Path,
) -> Result<ResultDocument, CliError> {
    let doc = ResultDocument::new(result, manifest);
    write_json(&doc, path)?;
    Ok(doc)
}

pub fn load_result(path: &Path) -> Result<ResultDocument, CliError> {
    let bytes = fs::read(path).map_err(|e| CliError::io(path, e))?;
    let doc: ResultDocument = serde_json::from_slice(&bytes)
        .map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))?;
    if doc.schema_version != SCHEMA_VERSION {
        return Err(CliError::Runtime(format!(
            "{}: schema version {} is not supported",
            path.display(),
            doc.schema_version
        )));
    }
    doc.result()
        .map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))?;
    Ok(doc)
}

/// Ground truth written next to simulated data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TruthDocument {
    pub schema_version: u32,
    pub t_len: usize,
    pub p: usize,
    pub break_points: Vec<usize>,
    pub noise_scales: Vec<f64>,
    /// Per segment, the `p × pq` stacked transition matrix.
    pub transitions: Vec<Rows>,
    pub lowrank_mats: Option<Vec<Rows>>,
    pub manifest: RunManifest,
}

impl TruthDocument {
    pub fn new(model: &PiecewiseVarModel, t_len: usize, p: usize, manifest: RunManifest) -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            t_len,
            p,
            break_points: model.break_points.clone(),
            noise_scales: model.noise_scales.clone(),
            transitions: model.segments.iter().map(|s| to_rows(&s.stacked())).collect(),
            lowrank_mats: model
                .lowrank
                .as_ref()
                .map(|v| v.iter().map(to_rows).collect()),
            manifest,
        }
    }
}

/// Parses flat `key = value` lines; blank lines and `#` comments are ignored.
pub fn parse_config(text: &str) -> Result<Vec<(String, String)>, String> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| format!("line {}: expected key = value", i + 1))?;
        let k = k.trim().trim_start_matches("--");
        if k.is_empty() || k.contains(char::is_whitespace) {
            return Err(format!("line {}: bad key {k:?}", i + 1));
        }
        out.push((k.to_string(), v.trim().to_string()));
    }
    Ok(out)
}

//! Line-delimited JSON for records and windows, plus the dataset manifest.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::{AtomicWindow, Dataset, FeatureStats, RawRecord, SKY_FIELD};
use crate::error::{Error, Result};
use crate::hexgrid::{build_topology, CellIndex};

#[derive(Serialize, Deserialize)]
struct RecordLine {
    cell: CellIndex,
    ts: i64,
    severity: u32,
    features: BTreeMap<String, Value>,
}

/// Integer codes for sky-cover labels, assigned in order of first appearance.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SkyCodebook {
    pub labels: Vec<String>,
}

impl SkyCodebook {
    pub fn code(&mut self, label: &str) -> f64 {
        let i = match self.labels.iter().position(|l| l == label) {
            Some(i) => i,
            None => {
                self.labels.push(label.to_string());
                self.labels.len() - 1
            }
        };
        i as f64
    }
}

/// Parses one record per line. Feature values may be numbers, `null`, or
/// (for `skyc1` only) string labels, which are coded through `codebook`.
pub fn read_records<R: BufRead>(r: R, codebook: &mut SkyCodebook) -> Result<Vec<RawRecord>> {
    let mut out = Vec::new();
    for (no, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: RecordLine =
            serde_json::from_str(&line).map_err(|e| Error::Parse(format!("record line {}: {e}", no + 1)))?;
        let mut features = BTreeMap::new();
        for (k, v) in rec.features {
            let val = match v {
                Value::Null => None,
                Value::Number(n) => n.as_f64(),
                Value::String(s) if k == SKY_FIELD => Some(codebook.code(&s)),
                other => return Err(Error::Parse(format!("line {}: `{k}` has unsupported value {other}", no + 1))),
            };
            features.insert(k, val);
        }
        out.push(RawRecord { cell: rec.cell, timestamp: rec.ts, severity: rec.severity, features });
    }
    Ok(out)
}

pub fn write_records<W: Write>(w: &mut W, records: &[RawRecord]) -> Result<()> {
    for r in records {
        let features = r
            .features
            .iter()
            .map(|(k, v)| (k.clone(), v.map_or(Value::Null, |x| serde_json::json!(x))))
            .collect();
        let line = RecordLine { cell: r.cell.clone(), ts: r.timestamp, severity: r.severity, features };
        serde_json::to_writer(&mut *w, &line)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

#[derive(Serialize, Deserialize)]
struct WindowLine {
    cell: CellIndex,
    ts: i64,
    severity: u32,
    y: u8,
    features: Vec<Option<f64>>,
}

pub fn write_windows<W: Write>(w: &mut W, ds: &Dataset) -> Result<()> {
    for win in ds.windows() {
        let line = WindowLine {
            cell: win.cell.clone(),
            ts: win.window_start,
            severity: win.severity_label,
            y: win.y,
            features: win.features.clone(),
        };
        serde_json::to_writer(&mut *w, &line)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

/// Sidecar describing how a window file was produced.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub feature_names: Vec<String>,
    pub stats: FeatureStats,
    pub window_secs: i64,
    pub min_records: usize,
    pub min_complete: f64,
    pub knn_k: usize,
    pub seed: u64,
    pub sky_codes: Vec<String>,
    #[serde(default)]
    pub notes: BTreeMap<String, String>,
}

pub fn read_windows<R: BufRead>(r: R, manifest: &Manifest) -> Result<Dataset> {
    let calendar = super::HolidayCalendar::default();
    let mut series: BTreeMap<CellIndex, Vec<AtomicWindow>> = BTreeMap::new();
    for (no, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let wl: WindowLine =
            serde_json::from_str(&line).map_err(|e| Error::Parse(format!("window line {}: {e}", no + 1)))?;
        let temporal = super::encode_temporal(wl.ts, &calendar)?;
        series.entry(wl.cell.clone()).or_default().push(AtomicWindow {
            cell: wl.cell,
            window_start: wl.ts,
            features: wl.features,
            temporal,
            severity_label: wl.severity,
            y: wl.y,
        });
    }
    for ws in series.values_mut() {
        ws.sort_by_key(|w| w.window_start);
    }
    let ds = Dataset {
        topology: build_topology(series.keys().cloned())?,
        series,
        feature_names: manifest.feature_names.clone(),
        stats: manifest.stats.clone(),
    };
    ds.validate(manifest.window_secs)?;
    Ok(ds)
}

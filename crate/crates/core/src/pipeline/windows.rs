use std::collections::{BTreeMap, BTreeSet};

use super::temporal::{encode_temporal, HolidayCalendar};
use super::{AtomicWindow, Dataset, FeatureStats, RawRecord, FEATURE_NAMES, HOUR, SKY_FIELD, WEATHER_FIELDS};
use crate::error::{invalid, Result};
use crate::hexgrid::{build_topology, CellIndex};

/// Fraction of absent values over `records × columns`.
pub fn missingness_ratio(records: &[RawRecord], columns: &[&str]) -> Result<f64> {
    if records.is_empty() || columns.is_empty() {
        return Err(invalid!("missingness needs at least one record and one column"));
    }
    let absent: usize = records.iter().map(|r| columns.iter().filter(|c| r.value(c).is_none()).count()).sum();
    Ok(absent as f64 / (records.len() * columns.len()) as f64)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct CellStats {
    pub total: usize,
    /// Records with every core column present.
    pub complete: usize,
}

impl CellStats {
    pub fn non_missing_ratio(&self) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            self.complete as f64 / self.total as f64
        }
    }
}

pub fn cell_stats(records: &[RawRecord], core_columns: &[&str]) -> BTreeMap<CellIndex, CellStats> {
    let mut out: BTreeMap<CellIndex, CellStats> = BTreeMap::new();
    for r in records {
        let s = out.entry(r.cell.clone()).or_default();
        s.total += 1;
        if core_columns.iter().all(|c| r.value(c).is_some()) {
            s.complete += 1;
        }
    }
    out
}

/// Cells with `total ≥ min_records` and `complete/total ≥ min_complete`.
pub fn filter_cells(stats: &BTreeMap<CellIndex, CellStats>, min_records: usize, min_complete: f64) -> BTreeSet<CellIndex> {
    stats
        .iter()
        .filter(|(_, s)| s.total >= min_records && s.non_missing_ratio() >= min_complete)
        .map(|(c, _)| c.clone())
        .collect()
}

/// Fills gaps by linear interpolation in time between the nearest observed
/// values on each side; leading/trailing gaps take the nearest value.
pub fn interpolate_bidirectional(ts: &[i64], vals: &mut [Option<f64>]) {
    let known: Vec<usize> = (0..vals.len()).filter(|&i| vals[i].is_some()).collect();
    let (Some(&first), Some(&last)) = (known.first(), known.last()) else { return };
    for i in 0..first {
        vals[i] = vals[first];
    }
    for i in last + 1..vals.len() {
        vals[i] = vals[last];
    }
    for pair in known.windows(2) {
        let (a, b) = (pair[0], pair[1]);
        let (va, vb) = (vals[a].unwrap(), vals[b].unwrap());
        let span = (ts[b] - ts[a]) as f64;
        for i in a + 1..b {
            let f = if span > 0.0 { (ts[i] - ts[a]) as f64 / span } else { 0.0 };
            vals[i] = Some(va + f * (vb - va));
        }
    }
}

pub fn aggregate_mean(values: &[f64]) -> Option<f64> {
    (!values.is_empty()).then(|| values.iter().sum::<f64>() / values.len() as f64)
}

/// Mean of integer sky-cover codes, rounded half away from zero.
pub fn aggregate_skyc1(codes: &[f64]) -> Option<f64> {
    aggregate_mean(codes).map(f64::round)
}

/// Per-field aggregate of the weather fields present in `obs`.
pub fn aggregate_weather(obs: &[&RawRecord]) -> BTreeMap<String, Option<f64>> {
    WEATHER_FIELDS
        .iter()
        .map(|&f| {
            let vals: Vec<f64> = obs.iter().filter_map(|r| r.value(f)).collect();
            let agg = if f == SKY_FIELD { aggregate_skyc1(&vals) } else { aggregate_mean(&vals) };
            (f.to_string(), agg)
        })
        .collect()
}

#[derive(Clone, Debug)]
pub struct WindowOptions {
    /// `[start, end)` in UTC seconds; defaults to the span of the records.
    pub period: Option<(i64, i64)>,
    pub window_secs: i64,
    pub calendar: HolidayCalendar,
    /// Leading share of windows used for feature statistics.
    pub train_fraction: f64,
}

impl Default for WindowOptions {
    fn default() -> Self {
        Self { period: None, window_secs: HOUR, calendar: HolidayCalendar::default(), train_fraction: 0.7 }
    }
}

/// Groups records into contiguous per-cell windows over the study period.
///
/// Weather fields are interpolated along each cell's record sequence first.
/// A window's severity is the worst severity it contains; windows without
/// records carry only the timestamp-derived columns.
pub fn build_windows(records: &[RawRecord], opts: &WindowOptions) -> Result<Dataset> {
    if records.is_empty() {
        return Err(invalid!("no records"));
    }
    let ws = opts.window_secs;
    if ws <= 0 || ws % HOUR != 0 {
        return Err(invalid!("window length {ws}s is not a positive multiple of an hour"));
    }
    let (start, end) = match opts.period {
        Some((s, e)) => (s.div_euclid(ws) * ws, e),
        None => {
            let lo = records.iter().map(|r| r.timestamp).min().unwrap();
            let hi = records.iter().map(|r| r.timestamp).max().unwrap();
            (lo.div_euclid(ws) * ws, hi.div_euclid(ws) * ws + ws)
        }
    };
    if end <= start {
        return Err(invalid!("empty study period [{start}, {end})"));
    }
    let n = ((end - start + ws - 1) / ws) as usize;

    let mut by_cell: BTreeMap<CellIndex, Vec<&RawRecord>> = BTreeMap::new();
    for r in records {
        if r.timestamp < start || r.timestamp >= end {
            return Err(invalid!("record {} at {} outside study period", r.cell, r.timestamp));
        }
        by_cell.entry(r.cell.clone()).or_default().push(r);
    }
    let topology = build_topology(by_cell.keys().cloned())?;
    let codes = (0..n)
        .map(|i| encode_temporal(start + i as i64 * ws, &opts.calendar))
        .collect::<Result<Vec<_>>>()?;

    let mut series = BTreeMap::new();
    for (cell, mut recs) in by_cell {
        recs.sort_by_key(|r| r.timestamp);
        let ts: Vec<i64> = recs.iter().map(|r| r.timestamp).collect();
        let mut filled: Vec<RawRecord> = recs.iter().map(|r| (*r).clone()).collect();
        for f in WEATHER_FIELDS {
            let mut col: Vec<Option<f64>> = recs.iter().map(|r| r.value(f)).collect();
            if col.iter().any(Option::is_some) {
                interpolate_bidirectional(&ts, &mut col);
                for (r, v) in filled.iter_mut().zip(col) {
                    r.features.insert(f.to_string(), v);
                }
            }
        }
        let mut buckets: Vec<Vec<&RawRecord>> = vec![Vec::new(); n];
        for r in &filled {
            buckets[((r.timestamp - start) / ws) as usize].push(r);
        }
        let windows = buckets
            .iter()
            .enumerate()
            .map(|(i, b)| make_window(&cell, start + i as i64 * ws, codes[i], b))
            .collect();
        series.insert(cell, windows);
    }
    let train_end = start + (n as f64 * opts.train_fraction).floor() as i64 * ws;
    let stats = FeatureStats::fit(series.values().flatten(), FEATURE_NAMES.len(), train_end);
    let ds = Dataset { topology, series, feature_names: FEATURE_NAMES.iter().map(|s| s.to_string()).collect(), stats };
    ds.validate(ws)?;
    Ok(ds)
}

fn make_window(cell: &CellIndex, start: i64, code: super::TemporalCode, recs: &[&RawRecord]) -> AtomicWindow {
    let weather = aggregate_weather(recs);
    let features = FEATURE_NAMES
        .iter()
        .map(|&f| {
            if let Some(v) = code.feature(f) {
                return Some(v);
            }
            if let Some(v) = weather.get(f) {
                return *v;
            }
            let vals: Vec<f64> = recs.iter().filter_map(|r| r.value(f)).collect();
            aggregate_mean(&vals)
        })
        .collect();
    let severity_label = recs.iter().map(|r| r.severity).max().unwrap_or(0);
    AtomicWindow {
        cell: cell.clone(),
        window_start: start,
        features,
        temporal: code,
        severity_label,
        y: u8::from(severity_label > 0),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(cell: &CellIndex, ts: i64, sev: u32, feats: &[(&str, Option<f64>)]) -> RawRecord {
        RawRecord {
            cell: cell.clone(),
            timestamp: ts,
            severity: sev,
            features: feats.iter().map(|(k, v)| (k.to_string(), *v)).collect(),
        }
    }

    #[test]
    fn missingness_examples() {
        let c = CellIndex::new("a", 0, 0);
        let cols = ["w", "x", "y", "z"];
        let full: Vec<RawRecord> =
            (0..5).map(|i| rec(&c, i, 0, &[("w", Some(1.0)), ("x", Some(1.0)), ("y", Some(1.0)), ("z", Some(1.0))])).collect();
        assert_eq!(missingness_ratio(&full, &cols).unwrap(), 0.0);
        let mut two = full.clone();
        two[1].features.insert("x".into(), None);
        two[3].features.remove("z");
        assert_eq!(missingness_ratio(&two, &cols).unwrap(), 0.1);
        let none: Vec<RawRecord> = (0..5).map(|i| rec(&c, i, 0, &[])).collect();
        assert_eq!(missingness_ratio(&none, &cols).unwrap(), 1.0);
        assert!(missingness_ratio(&[], &cols).is_err());
    }

    #[test]
    fn filter_thresholds() {
        let mk = |total, complete| CellStats { total, complete };
        let stats: BTreeMap<CellIndex, CellStats> = [
            (CellIndex::new("a", 0, 0), mk(99, 99)),
            (CellIndex::new("a", 1, 0), mk(200, 190)),
            (CellIndex::new("a", 2, 0), mk(1000, 940)),
        ]
        .into_iter()
        .collect();
        let kept = filter_cells(&stats, 100, 0.95);
        assert_eq!(kept.into_iter().collect::<Vec<_>>(), vec![CellIndex::new("a", 1, 0)]);
    }

    #[test]
    fn weather_aggregation_examples() {
        assert_eq!(aggregate_mean(&[50.0, 60.0, 70.0]), Some(60.0));
        assert_eq!(aggregate_skyc1(&[0.0, 1.0, 1.0]), Some(1.0));
        assert_eq!(aggregate_skyc1(&[1.0, 2.0]), Some(2.0));
        assert_eq!(aggregate_mean(&[]), None);
    }

    #[test]
    fn interpolation_fills_between_and_extends_ends() {
        let ts = [0, 10, 20, 30, 40];
        let mut v = [None, Some(1.0), None, Some(3.0), None];
        interpolate_bidirectional(&ts, &mut v);
        assert_eq!(v, [Some(1.0), Some(1.0), Some(2.0), Some(3.0), Some(3.0)]);
        let mut all_none = [None, None];
        interpolate_bidirectional(&ts[..2], &mut all_none);
        assert_eq!(all_none, [None, None]);
    }

    #[test]
    fn worst_case_severity_and_background() {
        let c = CellIndex::new("a", 0, 0);
        let recs = vec![
            rec(&c, 100, 2, &[("tmpf", Some(50.0))]),
            rec(&c, 200, 4, &[("tmpf", Some(70.0))]),
            rec(&c, 2 * HOUR + 5, 0, &[("tmpf", Some(60.0))]),
        ];
        let ds = build_windows(&recs, &WindowOptions::default()).unwrap();
        let ws = &ds.series[&c];
        assert_eq!(ws.len(), 3);
        assert_eq!((ws[0].severity_label, ws[0].y), (4, 1));
        let t = super::super::feature_index("tmpf").unwrap();
        assert_eq!(ws[0].features[t], Some(60.0));
        assert_eq!((ws[1].severity_label, ws[1].y), (0, 0));
        // the empty hour carries only timestamp-derived columns
        assert_eq!(ws[1].features[t], None);
        assert_eq!(ws[1].features[0], Some(1.0));
    }
}

//! Record ingestion, cell filtering, hourly windowing, temporal encoding,
//! weather aggregation and kNN imputation.

mod impute;
pub mod io;
mod temporal;
mod windows;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::hexgrid::{CellIndex, GridTopology};

pub use impute::{
    impute_knn, imputation_eval, knn_fill, ImputeErrors, Imputer, KnnImputer, MeanImputer, OracleImputer,
};
pub use temporal::{encode_temporal, HolidayCalendar, TemporalCode, ONE_HOT_WIDTH};
pub use windows::{
    aggregate_mean, aggregate_skyc1, aggregate_weather, build_windows, cell_stats, filter_cells,
    interpolate_bidirectional, missingness_ratio, CellStats, WindowOptions,
};

pub const HOUR: i64 = 3600;

/// The 21-column feature schema, in fixed order.
pub const FEATURE_NAMES: [&str; 21] = [
    "date",
    "day",
    "month",
    "relh",
    "alti",
    "drct",
    "tmpf",
    "dwpf",
    "sknt",
    "rush_hour",
    "season",
    "vsby",
    "skyc1",
    "traffic_signal",
    "part_of_day",
    "p01i",
    "crossing",
    "us_holiday",
    "population_density",
    "median_home_value",
    "housing_occupancy_renter_occupied",
];

/// Schema columns derived from the window timestamp rather than observed.
pub const TEMPORAL_FEATURES: [&str; 7] = ["date", "day", "month", "rush_hour", "season", "part_of_day", "us_holiday"];

/// Raw weather-station fields: interpolated in time, averaged per window.
pub const WEATHER_FIELDS: [&str; 10] = ["tmpf", "dwpf", "relh", "drct", "sknt", "p01i", "alti", "mslp", "vsby", "skyc1"];

pub const SKY_FIELD: &str = "skyc1";

pub fn feature_index(name: &str) -> Option<usize> {
    FEATURE_NAMES.iter().position(|&f| f == name)
}

pub fn is_temporal(name: &str) -> bool {
    TEMPORAL_FEATURES.contains(&name)
}

/// Indices of the observed (non-temporal) schema columns.
pub fn observed_columns() -> Vec<usize> {
    (0..FEATURE_NAMES.len()).filter(|&i| !is_temporal(FEATURE_NAMES[i])).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct RawRecord {
    pub cell: CellIndex,
    pub timestamp: i64,
    pub severity: u32,
    pub features: BTreeMap<String, Option<f64>>,
}

impl RawRecord {
    pub fn value(&self, name: &str) -> Option<f64> {
        self.features.get(name).copied().flatten()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AtomicWindow {
    pub cell: CellIndex,
    pub window_start: i64,
    /// Schema-ordered values; `None` marks an absent entry.
    pub features: Vec<Option<f64>>,
    pub temporal: TemporalCode,
    pub severity_label: u32,
    pub y: u8,
}

impl AtomicWindow {
    pub fn is_complete(&self) -> bool {
        self.features.iter().all(Option::is_some)
    }

    /// Dense feature vector; fails if any entry is absent.
    pub fn values(&self) -> Result<Vec<f64>> {
        self.features
            .iter()
            .enumerate()
            .map(|(i, v)| v.ok_or_else(|| invalid!("{} at {}: `{}` is absent", self.cell, self.window_start, FEATURE_NAMES[i])))
            .collect()
    }
}

/// Per-feature mean / standard deviation over the training split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl FeatureStats {
    /// Population statistics of observed values in windows starting before
    /// `train_end`. Constant or unobserved columns get std 1.
    pub fn fit<'a, I: IntoIterator<Item = &'a AtomicWindow>>(windows: I, width: usize, train_end: i64) -> Self {
        let mut sum = vec![0.0; width];
        let mut sq = vec![0.0; width];
        let mut n = vec![0usize; width];
        for w in windows.into_iter().filter(|w| w.window_start < train_end) {
            for (j, v) in w.features.iter().enumerate() {
                if let Some(v) = v {
                    sum[j] += v;
                    sq[j] += v * v;
                    n[j] += 1;
                }
            }
        }
        let mut mean = vec![0.0; width];
        let mut std = vec![1.0; width];
        for j in 0..width {
            if n[j] > 0 {
                mean[j] = sum[j] / n[j] as f64;
                let var = (sq[j] / n[j] as f64 - mean[j] * mean[j]).max(0.0);
                if var > 1e-24 {
                    std[j] = var.sqrt();
                }
            }
        }
        Self { mean, std }
    }

    pub fn z(&self, j: usize, v: f64) -> f64 {
        (v - self.mean[j]) / self.std[j]
    }
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub topology: GridTopology,
    pub series: BTreeMap<CellIndex, Vec<AtomicWindow>>,
    pub feature_names: Vec<String>,
    pub stats: FeatureStats,
}

impl Dataset {
    /// Checks that every series cell is in the topology and that window starts
    /// are hour-aligned and strictly increasing by one window length.
    pub fn validate(&self, window_secs: i64) -> Result<()> {
        for (cell, ws) in &self.series {
            if !self.topology.contains(cell) {
                return Err(invalid!("series cell {cell} missing from topology"));
            }
            for w in ws {
                if w.window_start % HOUR != 0 {
                    return Err(invalid!("{cell}: window {} not hour-aligned", w.window_start));
                }
                if (w.y == 1) != (w.severity_label > 0) {
                    return Err(invalid!("{cell}: label inconsistent at {}", w.window_start));
                }
                if w.features.len() != self.feature_names.len() {
                    return Err(invalid!("{cell}: feature width {} != {}", w.features.len(), self.feature_names.len()));
                }
            }
            for pair in ws.windows(2) {
                if pair[1].window_start - pair[0].window_start != window_secs {
                    return Err(invalid!("{cell}: windows not contiguous at {}", pair[1].window_start));
                }
            }
        }
        Ok(())
    }

    pub fn num_windows(&self) -> usize {
        self.series.values().map(Vec::len).sum()
    }

    pub fn absent_count(&self) -> usize {
        self.windows().map(|w| w.features.iter().filter(|v| v.is_none()).count()).sum()
    }

    /// All windows ordered by (cell, window_start).
    pub fn windows(&self) -> impl Iterator<Item = &AtomicWindow> {
        self.series.values().flatten()
    }

    /// Shared window starts, taken from the first cell.
    pub fn timeline(&self) -> Vec<i64> {
        self.series.values().next().map(|ws| ws.iter().map(|w| w.window_start).collect()).unwrap_or_default()
    }

    /// Cells of the listed regions only, with feature statistics refitted on
    /// the leading `train_fraction` of their timeline.
    pub fn subset(&self, regions: &[String], train_fraction: f64) -> Result<Dataset> {
        let series: BTreeMap<CellIndex, Vec<AtomicWindow>> = self
            .series
            .iter()
            .filter(|(c, _)| regions.contains(&c.region_id))
            .map(|(c, ws)| (c.clone(), ws.clone()))
            .collect();
        if series.is_empty() {
            return Err(invalid!("no cells in regions {regions:?}"));
        }
        let topology = crate::hexgrid::build_topology(series.keys().cloned())?;
        let t = series.values().next().map(|ws| ws.iter().map(|w| w.window_start).collect::<Vec<_>>()).unwrap_or_default();
        let cut = (t.len() as f64 * train_fraction).floor() as usize;
        let train_end = t.get(cut).copied().unwrap_or(i64::MAX);
        let stats = FeatureStats::fit(series.values().flatten(), self.feature_names.len(), train_end);
        Ok(Dataset { topology, series, feature_names: self.feature_names.clone(), stats })
    }

    /// True when every cell covers the same window starts.
    pub fn is_aligned(&self) -> bool {
        let t = self.timeline();
        self.series.values().all(|ws| ws.len() == t.len() && ws.iter().zip(&t).all(|(w, &s)| w.window_start == s))
    }
}

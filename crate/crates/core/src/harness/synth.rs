//! Synthetic hex-grid data with planted risk structure.
//!
//! Per cell `c` and hour `t` the label probability is
//!
//! ```text
//! logit = b0 + own(c, t) + spill * (nb(c, t) + e(t)) + w_s * s_c
//! own   = w_own * a(c, t)                          low-volatility cells
//!       = w_own * sum_{k<m} r(c, t-k) / sd         high-volatility cells
//! nb    = w_nb * √deg * mean_{n ∈ N(c)} a(n, t)
//! ```
//!
//! `a ~ N(0, 1)` is observed through `sknt` and `r` through `p01i`. `r` is a
//! spatially smoothed field of innovations that are Student-t with 3 degrees
//! of freedom in high-volatility cells and Gaussian otherwise. `e` is a
//! regional AR(1) latent seen noisily through every cell's `vsby`, and `s_c`
//! is a static offset written into the tile intensity. High-volatility
//! tiles carry a blocky random texture, low-volatility tiles are nearly
//! uniform. `b0` is found by bisection so that the mean probability equals
//! the requested positive rate.
//!
//! Smoothing mixes each cell with its neighbours at weight `spill`; the
//! regime map, `s_c` and `r` all use it, so with `spill = 0` every cell is
//! independent of every other.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal, StudentT};

use crate::encoders::Tile;
use crate::error::{invalid, Result};
use crate::hexgrid::{build_topology, rect_patch, CellIndex, GridTopology};
use crate::pipeline::{build_windows, impute_knn, Dataset, HolidayCalendar, RawRecord, WindowOptions, HOUR};

/// Monday 2022-11-07 00:00 UTC. A 2000-hour series then keeps the
/// validation and test hours inside a month the training hours reach.
pub const DEFAULT_START: i64 = 1_667_779_200;

#[derive(Clone, Debug, PartialEq)]
pub struct SynthSpec {
    pub regions: Vec<String>,
    pub cols: usize,
    pub rows: usize,
    pub hours: usize,
    pub start: i64,
    pub positive_rate: f64,
    /// Scales every cross-cell term; 0 makes cells independent.
    pub spillover: f64,
    pub high_vol_fraction: f64,
    /// Per-entry probability that a raw record value is absent.
    pub missing_rate: f64,
    pub tile_px: usize,
    pub memory_hours: usize,
    pub w_own: f64,
    pub w_nb: f64,
    pub w_static: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            regions: vec!["r0".into()],
            cols: 10,
            rows: 10,
            hours: 2000,
            start: DEFAULT_START,
            positive_rate: 0.1,
            spillover: 1.0,
            high_vol_fraction: 0.5,
            missing_rate: 0.001,
            tile_px: 32,
            memory_hours: 6,
            w_own: 2.0,
            w_nb: 1.0,
            w_static: 0.8,
            seed: 11,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.regions.is_empty() || self.cols == 0 || self.rows == 0 {
            return Err(invalid!("synth grid must be non-empty"));
        }
        if self.hours < 2 * self.memory_hours.max(1) {
            return Err(invalid!("{} hours is too short", self.hours));
        }
        if !(self.positive_rate > 0.0 && self.positive_rate <= 0.5) {
            return Err(invalid!("positive rate {} outside (0, 0.5]", self.positive_rate));
        }
        if !(0.0..=1.0).contains(&self.high_vol_fraction) || !(0.0..0.5).contains(&self.missing_rate) {
            return Err(invalid!("fractions out of range"));
        }
        if self.start % HOUR != 0 || self.memory_hours == 0 || self.tile_px == 0 {
            return Err(invalid!("start must be hour-aligned; memory and tile size positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct SynthData {
    pub spec: SynthSpec,
    pub topology: GridTopology,
    pub records: Vec<RawRecord>,
    pub tiles: BTreeMap<CellIndex, Tile>,
    pub high_vol: BTreeMap<CellIndex, bool>,
    /// Planted label probability per cell and hour.
    pub probs: BTreeMap<CellIndex, Vec<f64>>,
    pub intercept: f64,
}

struct Latents {
    a: Vec<Vec<f64>>,
    r: Vec<Vec<f64>>,
}

const SD_HIGH: f64 = 1.5;
const SD_LOW: f64 = 0.5;
/// High-volatility tiles are a `4 × 4` grid of random-intensity blocks.
const TEXTURE_BLOCKS: usize = 4;

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

/// `(z_i + spill * Σ_{n ∈ N(i)} z_n) / √(1 + spill² deg)`: unit variance for
/// independent unit inputs.
fn smooth(topology: &GridTopology, z: &[f64], spill: f64) -> Vec<f64> {
    (0..z.len())
        .map(|i| {
            let nb = topology.neighbor_indices(i);
            let s: f64 = nb.iter().map(|&j| z[j]).sum();
            (z[i] + spill * s) / (1.0 + spill * spill * nb.len() as f64).sqrt()
        })
        .collect()
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Intercept whose mean probability over `scores` equals `rate`.
fn calibrate_intercept(scores: &[f64], rate: f64) -> f64 {
    let mean = |b: f64| scores.iter().map(|&s| sigmoid(b + s)).sum::<f64>() / scores.len() as f64;
    let (mut lo, mut hi) = (-40.0, 40.0);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mean(mid) < rate {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

pub fn generate_synth(spec: &SynthSpec) -> Result<SynthData> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let t3 = StudentT::new(3.0).map_err(|e| invalid!("{e}"))?;
    let cells: Vec<CellIndex> =
        spec.regions.iter().flat_map(|reg| rect_patch(reg, spec.cols, spec.rows)).collect();
    let topology = build_topology(cells)?;
    let n = topology.len();
    let h = spec.hours;

    // static per-cell fields, in topology order
    let spill = spec.spillover;
    let field: Vec<f64> = (0..n).map(|_| normal(&mut rng)).collect();
    let field = smooth(&topology, &smooth(&topology, &field, spill), spill);
    let mut sorted = field.clone();
    sorted.sort_by(f64::total_cmp);
    let n_high = (spec.high_vol_fraction * n as f64).round() as usize;
    let cut = if n_high == 0 { f64::INFINITY } else { sorted[n - n_high] };
    let high: Vec<bool> = field.iter().map(|&f| f >= cut).collect();
    let s_raw: Vec<f64> = (0..n).map(|_| normal(&mut rng)).collect();
    let s_c: Vec<f64> = smooth(&topology, &s_raw, spill).into_iter().map(|v| v.clamp(-2.5, 2.5)).collect();
    let urban: Vec<f64> = (0..n).map(|_| normal(&mut rng)).collect();

    let mut lat = Latents { a: vec![vec![0.0; h]; n], r: vec![vec![0.0; h]; n] };
    let mut e_by_region: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for reg in &spec.regions {
        let rho: f64 = 0.9;
        let mut e = Vec::with_capacity(h);
        let mut x = normal(&mut rng);
        for _ in 0..h {
            e.push(x);
            x = rho * x + (1.0 - rho * rho).sqrt() * normal(&mut rng);
        }
        e_by_region.insert(reg.clone(), e);
    }
    let mut innov = vec![0.0; n];
    for t in 0..h {
        for i in 0..n {
            lat.a[i][t] = normal(&mut rng);
            innov[i] = if high[i] { SD_HIGH * t3.sample(&mut rng) / 3f64.sqrt() } else { SD_LOW * normal(&mut rng) };
        }
        for (i, v) in smooth(&topology, &innov, spill).into_iter().enumerate() {
            lat.r[i][t] = v;
        }
    }

    let m = spec.memory_hours;
    let memory = |i: usize, t: usize| -> f64 { lat.r[i][t.saturating_sub(m - 1)..=t].iter().sum() };
    let mem_sd = {
        let v: Vec<f64> = (0..n).filter(|&i| high[i]).flat_map(|i| (0..h).map(move |t| (i, t))).map(|(i, t)| memory(i, t)).collect();
        if v.is_empty() {
            1.0
        } else {
            let mean = v.iter().sum::<f64>() / v.len() as f64;
            (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / v.len() as f64).sqrt().max(1e-12)
        }
    };
    let mut scores = vec![vec![0.0; h]; n];
    for i in 0..n {
        let e = &e_by_region[&topology.cell(i).region_id];
        let nb = topology.neighbor_indices(i);
        for t in 0..h {
            let own = if high[i] { spec.w_own * memory(i, t) / mem_sd } else { spec.w_own * lat.a[i][t] };
            let nbt = if nb.is_empty() {
                0.0
            } else {
                let mean = nb.iter().map(|&j| lat.a[j][t]).sum::<f64>() / nb.len() as f64;
                spec.w_nb * (nb.len() as f64).sqrt() * mean
            };
            scores[i][t] = own + spec.spillover * (nbt + e[t]) + spec.w_static * s_c[i];
        }
    }
    let flat: Vec<f64> = scores.iter().flatten().copied().collect();
    let b0 = calibrate_intercept(&flat, spec.positive_rate);

    // regional weather fields
    let mut weather: BTreeMap<String, Vec<[f64; 3]>> = BTreeMap::new();
    for reg in &spec.regions {
        let mut w = [normal(&mut rng), normal(&mut rng), normal(&mut rng)];
        let mut field = Vec::with_capacity(h);
        for _ in 0..h {
            field.push(w);
            for v in &mut w {
                *v = 0.97 * *v + 0.243 * normal(&mut rng);
            }
        }
        weather.insert(reg.clone(), field);
    }

    let mut probs = BTreeMap::new();
    let mut records = Vec::with_capacity(n * h);
    for i in 0..n {
        let cell = topology.cell(i).clone();
        let reg = &cell.region_id;
        let e = &e_by_region[reg];
        let wf = &weather[reg];
        let offset = 0.8 * normal(&mut rng);
        let u = urban[i];
        let statics = [
            f64::from(u + 0.3 * normal(&mut rng) > 0.0),
            f64::from(u + 0.3 * normal(&mut rng) > 0.5),
            2000.0 + 1500.0 * u + 100.0 * normal(&mut rng),
            300_000.0 + 80_000.0 * u + 5_000.0 * normal(&mut rng),
            0.4 + 0.1 * u + 0.01 * normal(&mut rng),
        ];
        let mut p_cell = Vec::with_capacity(h);
        for t in 0..h {
            let p = sigmoid(b0 + scores[i][t]);
            p_cell.push(p);
            let y = rng.random::<f64>() < p;
            let severity = if y { rng.random_range(1..=4) } else { 0 };
            let hour_of_day = (t % 24) as f64;
            let [w1, w2, w3] = wf[t];
            let tmpf = 50.0 + 12.0 * (std::f64::consts::TAU * (hour_of_day - 9.0) / 24.0).sin() + 10.0 * w1 + offset
                + 0.5 * normal(&mut rng);
            let dwpf = tmpf - 8.0 - 3.0 * w2.abs() + 0.5 * normal(&mut rng);
            let relh = (100.0 - 2.2 * (tmpf - dwpf) + normal(&mut rng)).clamp(5.0, 100.0);
            let values: [(&str, f64); 15] = [
                ("tmpf", tmpf),
                ("dwpf", dwpf),
                ("relh", relh),
                ("drct", rng.random_range(0.0..360.0)),
                ("sknt", 12.0 + 4.0 * lat.a[i][t]),
                ("p01i", lat.r[i][t]),
                ("alti", 30.0 + 0.2 * w2 + 0.01 * normal(&mut rng)),
                ("mslp", 1013.0 + 6.7 * w2 + 0.3 * normal(&mut rng)),
                ("vsby", 8.0 + 1.5 * (e[t] + 1.5 * normal(&mut rng))),
                ("skyc1", (2.0 + 1.2 * w3).round().clamp(0.0, 4.0)),
                ("traffic_signal", statics[0]),
                ("crossing", statics[1]),
                ("population_density", statics[2]),
                ("median_home_value", statics[3]),
                ("housing_occupancy_renter_occupied", statics[4]),
            ];
            let mut features = BTreeMap::new();
            for (k, v) in values {
                let absent = spec.missing_rate > 0.0 && rng.random::<f64>() < spec.missing_rate;
                features.insert(k.to_string(), if absent { None } else { Some(v) });
            }
            records.push(RawRecord {
                cell: cell.clone(),
                timestamp: spec.start + t as i64 * HOUR + 600,
                severity,
                features,
            });
        }
        probs.insert(cell, p_cell);
    }

    let mut tiles = BTreeMap::new();
    let mut high_vol = BTreeMap::new();
    let px = spec.tile_px;
    for i in 0..n {
        let base = 0.5 + 0.12 * s_c[i];
        let blocks: Vec<f64> = (0..TEXTURE_BLOCKS * TEXTURE_BLOCKS).map(|_| rng.random_range(-0.45..0.45)).collect();
        let data: Vec<f64> = (0..px * px)
            .map(|k| {
                let (r, c) = (k / px, k % px);
                let v = if high[i] {
                    let b = (r * TEXTURE_BLOCKS / px) * TEXTURE_BLOCKS + c * TEXTURE_BLOCKS / px;
                    base + blocks[b] + rng.random_range(-0.05..0.05)
                } else {
                    base + 0.02 * ((r + c) as f64 / (2.0 * px as f64) - 0.5)
                };
                v.clamp(0.0, 1.0)
            })
            .collect();
        tiles.insert(topology.cell(i).clone(), Tile::new(px, data)?);
        high_vol.insert(topology.cell(i).clone(), high[i]);
    }

    Ok(SynthData { spec: spec.clone(), topology, records, tiles, high_vol, probs, intercept: b0 })
}

impl SynthData {
    /// Runs the preprocessing pipeline (windowing, statistics, kNN imputation).
    pub fn dataset(&self, knn_k: usize) -> Result<Dataset> {
        let opts = WindowOptions {
            period: Some((self.spec.start, self.spec.start + self.spec.hours as i64 * HOUR)),
            calendar: HolidayCalendar::us_fixed(),
            ..WindowOptions::default()
        };
        let ds = build_windows(&self.records, &opts)?;
        impute_knn(&ds, knn_k)
    }

    pub fn empirical_rate(&self) -> f64 {
        let pos = self.records.iter().filter(|r| r.severity > 0).count();
        pos as f64 / self.records.len() as f64
    }

    /// Description of the planted process and its realised parameters.
    pub fn manifest(&self) -> String {
        let s = &self.spec;
        let mut out = String::new();
        let _ = writeln!(out, "risk=logit(b0 + own + spillover*(nb + e) + w_static*s_c)");
        let _ = writeln!(out, "own_low=w_own*a(c,t) [sknt]");
        let _ = writeln!(out, "own_high=w_own*sum_{{k<memory_hours}} r(c,t-k)/sd [p01i, r smoothed at spillover]");
        let _ = writeln!(out, "nb=w_nb*sqrt(deg)*mean_neighbours a(n,t)");
        let _ = writeln!(out, "e=regional AR(1) rho=0.9 [vsby, noisy]");
        let _ = writeln!(out, "s_c=static offset [tile intensity]");
        let _ = writeln!(out, "regions={}", s.regions.join(","));
        let _ = writeln!(out, "cols={}\nrows={}\nhours={}\nstart={}", s.cols, s.rows, s.hours, s.start);
        let _ = writeln!(out, "positive_rate={}\nspillover={}\nhigh_vol_fraction={}", s.positive_rate, s.spillover, s.high_vol_fraction);
        let _ = writeln!(out, "missing_rate={}\ntile_px={}\nmemory_hours={}", s.missing_rate, s.tile_px, s.memory_hours);
        let _ = writeln!(out, "w_own={}\nw_nb={}\nw_static={}\nseed={}", s.w_own, s.w_nb, s.w_static, s.seed);
        let _ = writeln!(out, "intercept={:.12}", self.intercept);
        let _ = writeln!(out, "empirical_rate={:.6}", self.empirical_rate());
        let hv = self.high_vol.values().filter(|&&v| v).count();
        let _ = writeln!(out, "high_vol_cells={hv}\ncells={}", self.high_vol.len());
        out
    }
}

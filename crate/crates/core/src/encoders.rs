//! Per-hour numeric and visual token encoders, the volatility score and the
//! look-back window gate.

use std::io::{Read, Write};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffcore::nn::{encoder_block, init_encoder_block, init_linear, linear};
use crate::diffcore::{Graph, ParamStore, Tensor, Var};
use crate::error::{invalid, shape_err, Error, Result};
use crate::pipeline::{AtomicWindow, FeatureStats, HOUR, ONE_HOT_WIDTH};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Modality {
    Numeric,
    Visual,
}

/// `tokens: [n_tokens, d]` covering `hours_covered` hours.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenSeq<T> {
    pub tokens: Tensor<T>,
    pub modality: Modality,
    pub hours_covered: usize,
}

impl<T: Scalar> TokenSeq<T> {
    pub fn new(tokens: Tensor<T>, modality: Modality, hours_covered: usize) -> Result<Self> {
        if tokens.shape().len() != 2 {
            return Err(shape_err!("token matrix must be rank 2, got {:?}", tokens.shape()));
        }
        if hours_covered == 0 || tokens.rows() % hours_covered != 0 {
            return Err(shape_err!("{} tokens do not split into {hours_covered} hours", tokens.rows()));
        }
        Ok(Self { tokens, modality, hours_covered })
    }

    pub fn len(&self) -> usize {
        self.tokens.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn width(&self) -> usize {
        self.tokens.cols()
    }

    pub fn tokens_per_hour(&self) -> usize {
        self.len() / self.hours_covered
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub d: usize,
    /// Numeric tokens per hour.
    pub t_tokens: usize,
    /// Visual tokens per tile; a perfect square.
    pub p_tokens: usize,
    pub tile_px: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    /// Adds the sinusoidal embedding of the window start to numeric tokens.
    pub time_embedding: bool,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self { d: 32, t_tokens: 4, p_tokens: 16, tile_px: 32, n_layers: 2, n_heads: 2, time_embedding: true }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.n_heads == 0 || self.d % self.n_heads != 0 {
            return Err(invalid!("d = {} not divisible by {} heads", self.d, self.n_heads));
        }
        if self.d % 2 != 0 {
            return Err(invalid!("d must be even for the time embedding"));
        }
        if self.t_tokens == 0 {
            return Err(invalid!("need at least one numeric token per hour"));
        }
        self.patch_side()?;
        Ok(())
    }

    pub fn grid_side(&self) -> Result<usize> {
        let s = (self.p_tokens as f64).sqrt().round() as usize;
        if s == 0 || s * s != self.p_tokens {
            return Err(invalid!("P = {} is not a perfect square", self.p_tokens));
        }
        Ok(s)
    }

    pub fn patch_side(&self) -> Result<usize> {
        let g = self.grid_side()?;
        if self.tile_px == 0 || self.tile_px % g != 0 {
            return Err(shape_err!("tile side {} not divisible by patch grid {g}", self.tile_px));
        }
        Ok(self.tile_px / g)
    }
}

/// Width of the per-hour numeric input: z-scored schema plus calendar one-hots.
pub fn numeric_input_width(n_features: usize) -> usize {
    n_features + ONE_HOT_WIDTH
}

pub fn numeric_input(w: &AtomicWindow, stats: &FeatureStats) -> Result<Vec<f64>> {
    let vals = w.values()?;
    let mut x: Vec<f64> = vals.iter().enumerate().map(|(j, &v)| stats.z(j, v)).collect();
    x.extend(w.temporal.one_hot());
    Ok(x)
}

/// Sinusoidal embedding of an absolute time with periods spaced
/// geometrically from 2 h to one week.
pub fn time_embedding(ts: i64, d: usize) -> Vec<f64> {
    let hours = ts as f64 / HOUR as f64;
    let half = d / 2;
    let mut out = vec![0.0; d];
    for i in 0..half {
        let frac = if half > 1 { i as f64 / (half - 1) as f64 } else { 0.0 };
        let period = 2.0 * 84f64.powf(frac);
        let a = std::f64::consts::TAU * hours / period;
        out[2 * i] = a.sin();
        out[2 * i + 1] = a.cos();
    }
    out
}

pub fn init_numeric_encoder<T: Scalar, R: Rng>(store: &mut ParamStore<T>, rng: &mut R, cfg: &EncoderConfig, in_dim: usize) {
    init_linear(store, rng, "num.in", in_dim, cfg.t_tokens * cfg.d, true);
    for l in 0..cfg.n_layers {
        init_encoder_block(store, rng, &format!("num.blk{l}"), cfg.d);
    }
}

pub fn init_visual_encoder<T: Scalar, R: Rng>(store: &mut ParamStore<T>, rng: &mut R, cfg: &EncoderConfig) -> Result<()> {
    let s = cfg.patch_side()?;
    init_linear(store, rng, "vis.patch", s * s, cfg.d, true);
    init_linear(store, rng, "vis.split", cfg.d, cfg.d, true);
    let pos: Vec<f64> = (0..cfg.p_tokens * cfg.d).map(|_| rng.random_range(-0.02..0.02)).collect();
    store.insert("vis.pos", Tensor::from_f64(&[cfg.p_tokens, cfg.d], &pos)?);
    for l in 0..cfg.n_layers {
        init_encoder_block(store, rng, &format!("vis.blk{l}"), cfg.d);
    }
    Ok(())
}

/// Numeric encoder over a batch of hours.
///
/// `x: [H, 1, in]` holds one input row per hour and `times` their window
/// starts. Returns `[H, T, d]`; attention runs within each hour.
pub fn numeric_tokens<T: Scalar>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    cfg: &EncoderConfig,
    x: Var,
    times: &[i64],
) -> Result<Var> {
    let (h, _, _) = g.value(x).dims3();
    if times.len() != h {
        return Err(shape_err!("{} timestamps for {h} hours", times.len()));
    }
    let proj = linear(g, store, "num.in", x)?;
    let mut z = g.reshape(proj, &[h, cfg.t_tokens, cfg.d])?;
    if cfg.time_embedding {
        let emb: Vec<f64> = times.iter().flat_map(|&t| time_embedding(t, cfg.d)).collect();
        let e = g.constant(Tensor::from_f64(&[h, 1, cfg.d], &emb)?);
        z = g.add(z, e)?;
    }
    for l in 0..cfg.n_layers {
        z = encoder_block(g, store, &format!("num.blk{l}"), z, cfg.n_heads)?;
    }
    Ok(z)
}

/// Row-averaging over each token's in-grid 3×3 neighbourhood.
pub fn neighbourhood_average<T: Scalar>(side: usize) -> Tensor<T> {
    let p = side * side;
    let mut a = vec![T::zero(); p * p];
    for r in 0..side {
        for c in 0..side {
            let mut nb = Vec::new();
            for dr in -1i64..=1 {
                for dc in -1i64..=1 {
                    let (rr, cc) = (r as i64 + dr, c as i64 + dc);
                    if rr >= 0 && cc >= 0 && (rr as usize) < side && (cc as usize) < side {
                        nb.push(rr as usize * side + cc as usize);
                    }
                }
            }
            let wgt = T::one() / T::from_usize(nb.len()).unwrap();
            for j in nb {
                a[(r * side + c) * p + j] = wgt;
            }
        }
    }
    Tensor::new(vec![p, p], a).expect("square")
}

/// Visual encoder over a batch of tiles given as patches `[C, P, s²]`.
/// Returns `[C, P, d]`.
pub fn visual_tokens<T: Scalar>(g: &mut Graph<T>, store: &ParamStore<T>, cfg: &EncoderConfig, patches: Var) -> Result<Var> {
    let x = linear(g, store, "vis.patch", patches)?;
    let avg = g.constant(neighbourhood_average(cfg.grid_side()?));
    let x = g.matmul(avg, x)?;
    let x = linear(g, store, "vis.split", x)?;
    let pos = g.param(store, "vis.pos")?;
    let mut z = g.add(x, pos)?;
    for l in 0..cfg.n_layers {
        z = encoder_block(g, store, &format!("vis.blk{l}"), z, cfg.n_heads)?;
    }
    Ok(z)
}

/// Square grayscale tile with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Tile {
    pub side: usize,
    pub data: Vec<f64>,
}

impl Tile {
    pub fn new(side: usize, data: Vec<f64>) -> Result<Self> {
        if side == 0 || side > 255 || data.len() != side * side {
            return Err(shape_err!("tile side {side} with {} values", data.len()));
        }
        if data.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(invalid!("tile values must lie in [0, 1]"));
        }
        Ok(Self { side, data })
    }

    /// Row-major patches `[P, s²]` for a `√P × √P` grid.
    pub fn patches<T: Scalar>(&self, cfg: &EncoderConfig) -> Result<Tensor<T>> {
        if self.side != cfg.tile_px {
            return Err(shape_err!("tile side {} but encoder expects {}", self.side, cfg.tile_px));
        }
        let g = cfg.grid_side()?;
        let s = cfg.patch_side()?;
        let mut out = Vec::with_capacity(self.data.len());
        for pr in 0..g {
            for pc in 0..g {
                for r in 0..s {
                    for c in 0..s {
                        out.push(T::lit(self.data[(pr * s + r) * self.side + pc * s + c]));
                    }
                }
            }
        }
        Tensor::new(vec![g * g, s * s], out)
    }

    /// One header byte with the side length, then row-major little-endian doubles.
    pub fn write_binary<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(&[self.side as u8])?;
        for v in &self.data {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_binary<R: Read>(r: &mut R) -> Result<Self> {
        let mut b = [0u8; 1];
        r.read_exact(&mut b)?;
        let side = b[0] as usize;
        let mut data = Vec::with_capacity(side * side);
        let mut b8 = [0u8; 8];
        for _ in 0..side * side {
            r.read_exact(&mut b8)?;
            data.push(f64::from_le_bytes(b8));
        }
        Tile::new(side, data).map_err(|e| Error::Parse(format!("tile: {e}")))
    }
}

/// Encodes consecutive hourly windows into `hours × T` tokens.
pub fn encode_numeric<T: Scalar>(
    windows: &[AtomicWindow],
    stats: &FeatureStats,
    store: &ParamStore<T>,
    cfg: &EncoderConfig,
) -> Result<TokenSeq<T>> {
    if windows.is_empty() {
        return Err(invalid!("no windows to encode"));
    }
    let rows = windows.iter().map(|w| numeric_input(w, stats)).collect::<Result<Vec<_>>>()?;
    let width = rows[0].len();
    let flat: Vec<f64> = rows.concat();
    let times: Vec<i64> = windows.iter().map(|w| w.window_start).collect();
    let mut g = Graph::new();
    let x = g.constant(Tensor::from_f64(&[windows.len(), 1, width], &flat)?);
    let z = numeric_tokens(&mut g, store, cfg, x, &times)?;
    let h = windows.len();
    let t = g.value(z).clone().reshape(&[h * cfg.t_tokens, cfg.d])?;
    TokenSeq::new(t, Modality::Numeric, h)
}

/// Encodes one tile into `P` tokens.
pub fn encode_visual<T: Scalar>(tile: &Tile, store: &ParamStore<T>, cfg: &EncoderConfig) -> Result<TokenSeq<T>> {
    let patches = tile.patches::<T>(cfg)?;
    let (p, s2) = (patches.rows(), patches.cols());
    let mut g = Graph::new();
    let x = g.constant(patches.reshape(&[1, p, s2])?);
    let z = visual_tokens(&mut g, store, cfg, x)?;
    let t = g.value(z).clone().reshape(&[p, cfg.d])?;
    TokenSeq::new(t, Modality::Visual, 1)
}

/// Mean over columns of the population standard deviation across rows.
pub fn column_spread<T: Scalar>(m: &[T], rows: usize, cols: usize) -> f64 {
    let mut total = 0.0;
    for j in 0..cols {
        let mean = (0..rows).map(|i| m[i * cols + j].as_f64()).sum::<f64>() / rows as f64;
        let var = (0..rows).map(|i| (m[i * cols + j].as_f64() - mean).powi(2)).sum::<f64>() / rows as f64;
        total += var.sqrt();
    }
    total / cols as f64
}

/// `u = ½(σ_num + σ_vis)` over one hour of tokens.
pub fn volatility<T: Scalar>(x_num: &TokenSeq<T>, x_vis: &TokenSeq<T>) -> Result<f64> {
    if x_num.hours_covered != 1 || x_vis.hours_covered != 1 {
        return Err(invalid!("volatility needs exactly one hour of tokens"));
    }
    let sn = column_spread(x_num.tokens.data(), x_num.len(), x_num.width());
    let sv = column_spread(x_vis.tokens.data(), x_vis.len(), x_vis.width());
    Ok(0.5 * (sn + sv))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GateThresholds {
    pub tau_low: f64,
    pub tau_high: f64,
}

/// Nearest-rank percentile (`pct` in whole percent) of sorted values.
pub fn nearest_rank(sorted: &[f64], pct: u32) -> f64 {
    let n = sorted.len();
    let rank = ((pct as usize * n).div_ceil(100)).clamp(1, n);
    sorted[rank - 1]
}

pub fn fit_thresholds_at(u: &[f64], low_pct: u32, high_pct: u32) -> Result<GateThresholds> {
    if u.is_empty() {
        return Err(invalid!("no volatility values"));
    }
    if low_pct > high_pct || high_pct > 100 {
        return Err(invalid!("bad percentiles {low_pct}/{high_pct}"));
    }
    let mut s = u.to_vec();
    s.sort_by(f64::total_cmp);
    Ok(GateThresholds { tau_low: nearest_rank(&s, low_pct), tau_high: nearest_rank(&s, high_pct) })
}

/// 33rd / 67th nearest-rank percentiles.
pub fn fit_thresholds(u: &[f64]) -> Result<GateThresholds> {
    fit_thresholds_at(u, 33, 67)
}

/// 6 above `τ_high`, 1 below `τ_low`, 3 in between (both ends inclusive).
pub fn select_window(u: f64, t: &GateThresholds) -> usize {
    if u > t.tau_high {
        6
    } else if u >= t.tau_low {
        3
    } else {
        1
    }
}

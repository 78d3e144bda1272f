//! Flat `key=value` configuration shared by every CLI command.

use std::fmt::Write as _;
use std::path::Path;

use crate::encoders::EncoderConfig;
use crate::error::{invalid, Error, Result};
use crate::fusion::FusionConfig;
use crate::headcalib::HeadConfig;
use crate::spatial::SpatialConfig;

use super::synth::SynthSpec;

macro_rules! config {
    ($($(#[doc = $doc:literal])* $field:ident : $ty:ty = $default:expr;)*) => {
        #[derive(Clone, Debug, PartialEq)]
        pub struct HarnessConfig {
            $($(#[doc = $doc])* pub $field: $ty,)*
        }

        impl Default for HarnessConfig {
            fn default() -> Self {
                Self { $($field: $default,)* }
            }
        }

        impl HarnessConfig {
            pub const KEYS: &'static [&'static str] = &[$(stringify!($field)),*];

            /// Sets one key from its textual value.
            pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
                match key {
                    $(stringify!($field) => {
                        self.$field = value.trim().parse::<$ty>().map_err(|e| {
                            Error::Parse(format!("config `{key}` = `{value}`: {e}"))
                        })?;
                    })*
                    _ => return Err(Error::Parse(format!("unknown config key `{key}`"))),
                }
                Ok(())
            }

            /// Every key with its current value, one per line.
            pub fn to_text(&self) -> String {
                let mut s = String::new();
                $(let _ = writeln!(s, "{}={}", stringify!($field), self.$field);)*
                s
            }
        }
    };
}

config! {
    seed: u64 = 7;
    epochs: usize = 40;
    /// Optimiser steps per epoch.
    steps_per_epoch: usize = 25;
    /// Time windows per step; every node of each window is in the batch.
    windows_per_step: usize = 8;
    lr_numeric: f64 = 7.5e-4;
    lr_visual: f64 = 1.5e-5;
    lr_other: f64 = 7.5e-4;
    weight_decay: f64 = 1e-4;
    d: usize = 32;
    t_tokens: usize = 4;
    p_tokens: usize = 16;
    tile_px: usize = 32;
    n_layers: usize = 2;
    n_heads: usize = 2;
    time_embedding: bool = true;
    dh: usize = 32;
    fusion_layers: usize = 2;
    globals: usize = 2;
    sparse_blocks: usize = 2;
    leaky_slope: f64 = 0.2;
    head_hidden: usize = 16;
    dropout: f64 = 0.2;
    mc_passes: usize = 10;
    threshold: f64 = 0.5;
    ece_bins: usize = 10;
    /// Evaluate every n-th validation hour during training.
    val_stride: usize = 1;
    /// Use every n-th training hour when fitting gate thresholds.
    gate_fit_stride: usize = 4;
    finetune_epochs: usize = 5;
    patience: usize = 2;
    synth_seed: u64 = 11;
    synth_regions: usize = 1;
    synth_cols: usize = 10;
    synth_rows: usize = 10;
    synth_hours: usize = 2000;
    synth_positive_rate: f64 = 0.1;
    synth_spillover: f64 = 0.8;
    synth_high_vol_fraction: f64 = 0.5;
    synth_missing_rate: f64 = 0.001;
    synth_w_own: f64 = 2.0;
    synth_w_nb: f64 = 1.0;
    synth_w_static: f64 = 0.8;
    knn_k: usize = 5;
    min_records: usize = 100;
    min_complete: f64 = 0.95;
}

impl HarnessConfig {
    /// Parses `key=value` lines; blank lines and `#` comments are ignored.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (no, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Parse(format!("config line {}: expected key=value", no + 1)))?;
            cfg.set(k.trim(), v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lr_numeric", self.lr_numeric),
            ("lr_visual", self.lr_visual),
            ("lr_other", self.lr_other),
        ] {
            if !(v > 0.0) {
                return Err(invalid!("{name} must be positive"));
            }
        }
        if self.epochs == 0 || self.steps_per_epoch == 0 || self.windows_per_step == 0 {
            return Err(invalid!("epochs, steps_per_epoch and windows_per_step must be positive"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(invalid!("dropout must lie in [0, 1)"));
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(invalid!("threshold must lie in (0, 1)"));
        }
        if self.val_stride == 0 || self.gate_fit_stride == 0 || self.mc_passes == 0 {
            return Err(invalid!("strides and mc_passes must be positive"));
        }
        self.encoder().validate()
    }

    pub fn encoder(&self) -> EncoderConfig {
        EncoderConfig {
            d: self.d,
            t_tokens: self.t_tokens,
            p_tokens: self.p_tokens,
            tile_px: self.tile_px,
            n_layers: self.n_layers,
            n_heads: self.n_heads,
            time_embedding: self.time_embedding,
        }
    }

    pub fn fusion(&self) -> FusionConfig {
        FusionConfig { dh: self.dh, layers: self.fusion_layers }
    }

    pub fn spatial(&self) -> SpatialConfig {
        SpatialConfig { leaky_slope: self.leaky_slope, globals: self.globals, blocks: self.sparse_blocks }
    }

    pub fn head(&self) -> HeadConfig {
        HeadConfig { hidden: self.head_hidden, dropout: self.dropout }
    }

    pub fn synth(&self) -> SynthSpec {
        SynthSpec {
            regions: (0..self.synth_regions).map(|i| format!("r{i}")).collect(),
            cols: self.synth_cols,
            rows: self.synth_rows,
            hours: self.synth_hours,
            positive_rate: self.synth_positive_rate,
            spillover: self.synth_spillover,
            high_vol_fraction: self.synth_high_vol_fraction,
            missing_rate: self.synth_missing_rate,
            tile_px: self.tile_px,
            w_own: self.synth_w_own,
            w_nb: self.synth_w_nb,
            w_static: self.synth_w_static,
            seed: self.synth_seed,
            ..SynthSpec::default()
        }
    }
}

//! Model and optimiser configuration, its validation, the flat key-value file
//! format, and the analytic parameter count.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Number of encoder (and decoder) blocks. Three 2× resolution changes
/// separate them.
pub const NUM_BLOCKS: usize = 4;
/// Squeeze-and-excite bottleneck is `channels / SE_REDUCTION` wide (at least 1).
pub const SE_REDUCTION: usize = 4;
/// Batch-norm running statistics: `running = m * running + (1 - m) * batch`.
pub const BN_MOMENTUM: f64 = 0.99;
pub const BN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub input_size: usize,
    pub channels: usize,
    pub context_frames: usize,
    pub total_frames: usize,
    pub z_dim: usize,
    pub g_dim: usize,
    pub rnn_size: usize,
    pub action_dim: usize,
    pub stage_filters: Vec<usize>,
    pub cells_per_block: usize,
    pub decoder_expand_ratio: usize,
    pub beta: f64,
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub grad_clip_l2: f64,
    pub batch_size: usize,
}

/// One failed invariant, naming the offending field.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Violation {
    pub field: &'static str,
    pub message: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.field, self.message)
    }
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::reference()
    }
}

impl ModelConfig {
    /// The 64×64 configuration: filters 64..512, h=128, z=10, LSTM 256,
    /// two context frames and ten predicted frames with 4-d actions.
    pub fn reference() -> Self {
        Self {
            input_size: 64,
            channels: 3,
            context_frames: 2,
            total_frames: 12,
            z_dim: 10,
            g_dim: 128,
            rnn_size: 256,
            action_dim: 4,
            stage_filters: vec![64, 128, 256, 512],
            cells_per_block: 2,
            decoder_expand_ratio: 4,
            beta: 1.0,
            learning_rate: 1e-3,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            grad_clip_l2: 100.0,
            batch_size: 128,
        }
    }

    /// The widened variant used to provoke overfitting on large data.
    pub fn scaled_500m() -> Self {
        Self {
            stage_filters: vec![80, 160, 320, 640],
            rnn_size: 512,
            ..Self::reference()
        }
    }

    /// Desk-scale variant for tests and toy experiments (32×32, 2-d actions).
    pub fn tiny() -> Self {
        Self {
            input_size: 32,
            context_frames: 2,
            total_frames: 6,
            z_dim: 4,
            g_dim: 16,
            rnn_size: 32,
            action_dim: 2,
            stage_filters: vec![8, 16, 32, 64],
            decoder_expand_ratio: 1,
            batch_size: 4,
            ..Self::reference()
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "reference" => Ok(Self::reference()),
            "scaled-500m" | "scaled_500m" => Ok(Self::scaled_500m()),
            "tiny" => Ok(Self::tiny()),
            other => Err(Error::Config(format!("unknown preset {other:?}"))),
        }
    }

    /// Side of the deepest feature map.
    pub fn latent_size(&self) -> usize {
        self.input_size >> (NUM_BLOCKS - 1)
    }

    pub fn max_filters(&self) -> usize {
        *self.stage_filters.last().expect("validated config has filters")
    }

    /// Width of the decoder input produced by the dynamics head.
    pub fn dynamics_output_len(&self) -> usize {
        self.latent_size() * self.latent_size() * self.max_filters()
    }

    pub fn validate(&self) -> Result<()> {
        let v = validate_config(self);
        if v.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidConfig(v))
        }
    }

    /// Key-sorted `key = value` text; the canonical serialisation.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (k, v) in self.entries() {
            out.push_str(&format!("{k} = {v}\n"));
        }
        out
    }

    fn entries(&self) -> BTreeMap<&'static str, String> {
        let mut m = BTreeMap::new();
        m.insert("input_size", self.input_size.to_string());
        m.insert("channels", self.channels.to_string());
        m.insert("context_frames", self.context_frames.to_string());
        m.insert("total_frames", self.total_frames.to_string());
        m.insert("z_dim", self.z_dim.to_string());
        m.insert("g_dim", self.g_dim.to_string());
        m.insert("rnn_size", self.rnn_size.to_string());
        m.insert("action_dim", self.action_dim.to_string());
        m.insert(
            "stage_filters",
            self.stage_filters
                .iter()
                .map(|f| f.to_string())
                .collect::<Vec<_>>()
                .join(","),
        );
        m.insert("cells_per_block", self.cells_per_block.to_string());
        m.insert("decoder_expand_ratio", self.decoder_expand_ratio.to_string());
        m.insert("beta", format!("{:?}", self.beta));
        m.insert("learning_rate", format!("{:?}", self.learning_rate));
        m.insert("adam_beta1", format!("{:?}", self.adam_beta1));
        m.insert("adam_beta2", format!("{:?}", self.adam_beta2));
        m.insert("adam_eps", format!("{:?}", self.adam_eps));
        m.insert("grad_clip_l2", format!("{:?}", self.grad_clip_l2));
        m.insert("batch_size", self.batch_size.to_string());
        m
    }

    /// Parses the flat key-value format. Keys absent from the text keep the
    /// value of `base`; unknown keys and duplicates are errors.
    pub fn parse_with_base(text: &str, base: Self) -> Result<Self> {
        let mut cfg = base;
        let mut seen = std::collections::BTreeSet::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", lineno + 1)))?;
            let (key, value) = (key.trim(), value.trim());
            if !seen.insert(key.to_string()) {
                return Err(Error::Config(format!("line {}: duplicate key {key:?}", lineno + 1)));
            }
            let bad = |what: &str| Error::Config(format!("line {}: {key} expects {what}, got {value:?}", lineno + 1));
            let int = || value.parse::<usize>().map_err(|_| bad("a non-negative integer"));
            let float = || value.parse::<f64>().map_err(|_| bad("a number"));
            match key {
                "input_size" => cfg.input_size = int()?,
                "channels" => cfg.channels = int()?,
                "context_frames" => cfg.context_frames = int()?,
                "total_frames" => cfg.total_frames = int()?,
                "z_dim" => cfg.z_dim = int()?,
                "g_dim" => cfg.g_dim = int()?,
                "rnn_size" => cfg.rnn_size = int()?,
                "action_dim" => cfg.action_dim = int()?,
                "stage_filters" => {
                    cfg.stage_filters = value
                        .split(',')
                        .map(|s| s.trim().parse::<usize>())
                        .collect::<std::result::Result<_, _>>()
                        .map_err(|_| bad("a comma-separated list of integers"))?
                }
                "cells_per_block" => cfg.cells_per_block = int()?,
                "decoder_expand_ratio" => cfg.decoder_expand_ratio = int()?,
                "beta" => cfg.beta = float()?,
                "learning_rate" => cfg.learning_rate = float()?,
                "adam_beta1" => cfg.adam_beta1 = float()?,
                "adam_beta2" => cfg.adam_beta2 = float()?,
                "adam_eps" => cfg.adam_eps = float()?,
                "grad_clip_l2" => cfg.grad_clip_l2 = float()?,
                "batch_size" => cfg.batch_size = int()?,
                other => return Err(Error::Config(format!("line {}: unknown key {other:?}", lineno + 1))),
            }
        }
        Ok(cfg)
    }

    /// Parses a config file whose keys override the reference preset.
    pub fn parse(text: &str) -> Result<Self> {
        Self::parse_with_base(text, Self::reference())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::parse(&text)
    }

    /// SHA-256 of the canonical serialisation, hex encoded.
    pub fn fingerprint(&self) -> String {
        let digest = Sha256::digest(self.to_text().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Checks every configuration invariant; an empty list means valid.
pub fn validate_config(cfg: &ModelConfig) -> Vec<Violation> {
    let mut v = Vec::new();
    let mut bad = |field: &'static str, message: &str| {
        v.push(Violation {
            field,
            message: message.to_string(),
        })
    };
    if cfg.input_size == 0 || cfg.input_size % 8 != 0 {
        bad("input_size", "input_size not divisible by 8");
    }
    if cfg.channels < 1 {
        bad("channels", "channels ≥ 1");
    }
    if cfg.context_frames < 1 {
        bad("context_frames", "context_frames ≥ 1");
    }
    if cfg.total_frames < 2 || cfg.total_frames <= cfg.context_frames {
        bad("total_frames", "total_frames ≥ 2 and > context_frames");
    }
    if cfg.z_dim < 1 {
        bad("z_dim", "z_dim ≥ 1");
    }
    if cfg.g_dim < 1 {
        bad("g_dim", "g_dim ≥ 1");
    }
    if cfg.rnn_size < 1 {
        bad("rnn_size", "rnn_size ≥ 1");
    }
    if cfg.stage_filters.len() != NUM_BLOCKS {
        bad("stage_filters", "stage_filters must list exactly 4 widths");
    } else if cfg.stage_filters.iter().any(|&f| f < 1) {
        bad("stage_filters", "all stage_filters ≥ 1");
    } else if cfg.stage_filters.windows(2).any(|w| w[1] != 2 * w[0]) {
        bad("stage_filters", "stage_filters must double from block to block");
    }
    if cfg.cells_per_block < 1 {
        bad("cells_per_block", "cells_per_block ≥ 1");
    }
    if cfg.decoder_expand_ratio < 1 {
        bad("decoder_expand_ratio", "decoder_expand_ratio ≥ 1");
    }
    if !(cfg.beta >= 0.0 && cfg.beta.is_finite()) {
        bad("beta", "beta must be finite and ≥ 0");
    }
    if !(cfg.learning_rate >= 0.0 && cfg.learning_rate.is_finite()) {
        bad("learning_rate", "learning_rate must be finite and ≥ 0");
    }
    if !(0.0..1.0).contains(&cfg.adam_beta1) {
        bad("adam_beta1", "adam_beta1 in [0, 1)");
    }
    if !(0.0..1.0).contains(&cfg.adam_beta2) {
        bad("adam_beta2", "adam_beta2 in [0, 1)");
    }
    if !(cfg.adam_eps > 0.0) {
        bad("adam_eps", "adam_eps > 0");
    }
    if !(cfg.grad_clip_l2 > 0.0) {
        bad("grad_clip_l2", "grad_clip_l2 > 0");
    }
    if cfg.batch_size < 1 {
        bad("batch_size", "batch_size ≥ 1");
    }
    v
}

fn se_params(c: usize) -> usize {
    let r = (c / SE_REDUCTION).max(1);
    c * r + r + r * c + c
}

fn lstm_params(input: usize, hidden: usize) -> usize {
    (input + hidden) * 4 * hidden + 4 * hidden
}

/// Learnable scalars implied by the architecture, computed layer by layer
/// without instantiating anything.
pub fn count_parameters(cfg: &ModelConfig) -> Result<usize> {
    cfg.validate()?;
    let f = &cfg.stage_filters;
    let mut total = 0usize;

    // Encoder cells: (bn, swish, 3x3) x2, squeeze-excite, residual.
    let mut cin = cfg.channels;
    for (b, &width) in f.iter().enumerate() {
        for j in 0..cfg.cells_per_block {
            let stride = if b > 0 && j == 0 { 2 } else { 1 };
            total += 2 * cin + 9 * cin * width + width;
            total += 2 * width + 9 * width * width + width;
            total += se_params(width);
            if cin != width || stride != 1 {
                total += cin * width + width;
            }
            cin = width;
        }
    }
    total += cfg.max_filters() * cfg.g_dim + cfg.g_dim;

    // Decoder cells, widest first, each fed by a 1x1-projected encoder skip.
    let mut cin = cfg.max_filters();
    for &width in f.iter().rev() {
        let wide = cfg.decoder_expand_ratio * width;
        for _ in 0..cfg.cells_per_block {
            total += width * cin + cin;
            total += 2 * cin + cin * wide + wide;
            total += 2 * wide + 25 * wide * wide + wide;
            total += 2 * wide + wide * width + width;
            total += 2 * width + se_params(width);
            if cin != width {
                total += cin * width + width;
            }
            cin = width;
        }
    }
    total += f[0] * cfg.channels + cfg.channels;

    // Dynamics (two LSTMs + image head) and posterior (one LSTM + gaussian head).
    total += lstm_params(cfg.g_dim + cfg.action_dim + cfg.z_dim, cfg.rnn_size);
    total += lstm_params(cfg.rnn_size, cfg.rnn_size);
    total += cfg.rnn_size * cfg.dynamics_output_len() + cfg.dynamics_output_len();
    total += lstm_params(cfg.g_dim, cfg.rnn_size);
    total += cfg.rnn_size * 2 * cfg.z_dim + 2 * cfg.z_dim;
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_are_valid() {
        for cfg in [ModelConfig::reference(), ModelConfig::tiny(), ModelConfig::scaled_500m()] {
            assert_eq!(validate_config(&cfg), vec![]);
        }
    }

    #[test]
    fn input_size_must_divide_by_eight() {
        let cfg = ModelConfig {
            input_size: 60,
            ..ModelConfig::reference()
        };
        let v = validate_config(&cfg);
        assert_eq!(v.len(), 1);
        assert_eq!(v[0].field, "input_size");
        assert_eq!(v[0].message, "input_size not divisible by 8");
    }

    #[test]
    fn zero_latent_is_rejected() {
        let cfg = ModelConfig {
            z_dim: 0,
            ..ModelConfig::reference()
        };
        let v = validate_config(&cfg);
        assert_eq!(v.len(), 1);
        assert_eq!(v[0].field, "z_dim");
        assert_eq!(v[0].message, "z_dim ≥ 1");
    }

    #[test]
    fn violations_accumulate() {
        let cfg = ModelConfig {
            input_size: 12,
            z_dim: 0,
            g_dim: 0,
            stage_filters: vec![1, 2, 3, 0],
            ..ModelConfig::reference()
        };
        let fields: Vec<_> = validate_config(&cfg).into_iter().map(|v| v.field).collect();
        assert_eq!(fields, vec!["input_size", "z_dim", "g_dim", "stage_filters"]);
    }

    #[test]
    fn text_round_trip_and_unknown_keys() {
        let cfg = ModelConfig::tiny();
        let back = ModelConfig::parse(&cfg.to_text()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.fingerprint(), cfg.fingerprint());
        assert!(ModelConfig::parse("z_dim = 3\nwarmup = 10\n").is_err());
        assert!(ModelConfig::parse("z_dim = 3\nz_dim = 4\n").is_err());
        assert!(ModelConfig::parse("z_dim = x\n").is_err());
        let partial = ModelConfig::parse("# comment\nz_dim = 3  # trailing\n").unwrap();
        assert_eq!(partial.z_dim, 3);
    }

    #[test]
    fn fingerprint_tracks_every_field() {
        let a = ModelConfig::reference();
        let b = ModelConfig {
            adam_eps: 1e-7,
            ..a.clone()
        };
        assert_ne!(a.fingerprint(), b.fingerprint());
        assert_eq!(a.fingerprint().len(), 64);
    }

    #[test]
    fn count_is_monotone_in_widths() {
        let base = ModelConfig::tiny();
        let wider = ModelConfig {
            stage_filters: base.stage_filters.iter().map(|f| 2 * f).collect(),
            ..base.clone()
        };
        assert!(count_parameters(&wider).unwrap() > count_parameters(&base).unwrap());
    }

    #[test]
    fn count_rejects_invalid_config() {
        let cfg = ModelConfig {
            input_size: 60,
            ..ModelConfig::reference()
        };
        assert!(matches!(count_parameters(&cfg), Err(Error::InvalidConfig(_))));
    }
}

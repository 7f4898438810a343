//! Pipeline hyperparameters and the line-oriented `key = value` config format.

use std::fmt::Write as _;

use crate::error::{MhstError, Result};

/// Hyperparameters shared by tree building, training and evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct Config {
    /// Fraction of eligible adjacent pairs merged per round, in (0, 1].
    pub alpha: f64,
    /// Prune threshold on node relevance, in [0, 1].
    pub tau: f64,
    /// Weight of the linguistic term in the merge score.
    pub lambda1: f64,
    /// Weight of the visual term in the merge score.
    pub lambda2: f64,
    /// Merge rounds between prune scans (`L`).
    pub scan_period: usize,
    /// Proposals kept for training (`K`).
    pub top_k: usize,
    /// Hinge margin of the intra-video loss.
    pub beta: f64,
    /// Pairs scoring below this are never merged.
    pub merge_stop_threshold: f64,
    /// Weights of (rank, inter, intra).
    pub loss_weights: [f64; 3],
    pub learning_rate: f64,
    /// Multiplier applied to the learning rate every `lr_decay_every` epochs.
    pub lr_decay_factor: f64,
    pub lr_decay_every: usize,
    pub seed: u64,
    /// Recompute down-weighting from the original leaf feature instead of compounding.
    pub downweight_once: bool,
    /// Disable to build trees without prune scans.
    pub pruning: bool,
    /// Frames per second, used only to map second-valued ground truth onto frames.
    pub fps: f64,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            alpha: 0.6,
            tau: 0.7,
            lambda1: 1.0,
            lambda2: 1.0,
            scan_period: 3,
            top_k: 8,
            beta: 0.2,
            merge_stop_threshold: 0.5,
            loss_weights: [1.0, 0.5, 0.5],
            learning_rate: 0.05,
            lr_decay_factor: 0.1,
            lr_decay_every: 35,
            seed: 0,
            downweight_once: false,
            pruning: true,
            fps: 1.0,
        }
    }
}

const KEYS: &[&str] = &[
    "alpha",
    "tau",
    "lambda1",
    "lambda2",
    "L",
    "K",
    "beta",
    "merge_stop_threshold",
    "loss_weights",
    "learning_rate",
    "lr_decay_factor",
    "lr_decay_every",
    "seed",
    "downweight_once",
    "pruning",
    "fps",
];

impl Config {
    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(MhstError::Config(m));
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return err(format!("alpha must be in (0, 1], got {}", self.alpha));
        }
        if !(0.0..=1.0).contains(&self.tau) {
            return err(format!("tau must be in [0, 1], got {}", self.tau));
        }
        if !(self.lambda1 >= 0.0 && self.lambda2 >= 0.0) {
            return err("lambda1 and lambda2 must be non-negative".into());
        }
        if self.scan_period == 0 {
            return err("L must be at least 1".into());
        }
        if self.top_k == 0 {
            return err("K must be at least 1".into());
        }
        if !(self.beta >= 0.0) {
            return err(format!("beta must be non-negative, got {}", self.beta));
        }
        if !(0.0..=1.0).contains(&self.merge_stop_threshold) {
            return err(format!(
                "merge_stop_threshold must be in [0, 1], got {}",
                self.merge_stop_threshold
            ));
        }
        if self.loss_weights.iter().any(|w| !(*w >= 0.0)) || self.loss_weights.iter().all(|w| *w == 0.0) {
            return err("loss_weights must be non-negative and not all zero".into());
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return err(format!("learning_rate must be finite and non-negative, got {}", self.learning_rate));
        }
        if !(self.lr_decay_factor > 0.0) || self.lr_decay_every == 0 {
            return err("lr_decay_factor must be positive and lr_decay_every at least 1".into());
        }
        if !(self.fps > 0.0) {
            return err("fps must be positive".into());
        }
        Ok(())
    }

    /// Learning rate in effect at `epoch` (0-based).
    pub fn learning_rate_at(&self, epoch: usize) -> f64 {
        let decays = (epoch / self.lr_decay_every) as i32;
        self.learning_rate * self.lr_decay_factor.powi(decays)
    }

    /// Apply one `key = value` assignment.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let bad = |what: &str| MhstError::Config(format!("invalid value `{value}` for `{key}`: expected {what}"));
        let float = || value.parse::<f64>().map_err(|_| bad("a number"));
        let uint = || value.parse::<usize>().map_err(|_| bad("a non-negative integer"));
        let boolean = || value.parse::<bool>().map_err(|_| bad("true or false"));
        match key {
            "alpha" => self.alpha = float()?,
            "tau" => self.tau = float()?,
            "lambda1" => self.lambda1 = float()?,
            "lambda2" => self.lambda2 = float()?,
            "L" => self.scan_period = uint()?,
            "K" => self.top_k = uint()?,
            "beta" => self.beta = float()?,
            "merge_stop_threshold" => self.merge_stop_threshold = float()?,
            "loss_weights" => {
                let parts: Vec<&str> = value.split(',').map(str::trim).collect();
                if parts.len() != 3 {
                    return Err(bad("three comma-separated numbers"));
                }
                for (slot, p) in self.loss_weights.iter_mut().zip(parts) {
                    *slot = p.parse().map_err(|_| bad("three comma-separated numbers"))?;
                }
            }
            "learning_rate" => self.learning_rate = float()?,
            "lr_decay_factor" => self.lr_decay_factor = float()?,
            "lr_decay_every" => self.lr_decay_every = uint()?,
            "seed" => self.seed = value.parse().map_err(|_| bad("an unsigned integer"))?,
            "downweight_once" => self.downweight_once = boolean()?,
            "pruning" => self.pruning = boolean()?,
            "fps" => self.fps = float()?,
            _ => {
                return Err(MhstError::Config(format!(
                    "unknown key `{key}` (known: {})",
                    KEYS.join(", ")
                )))
            }
        }
        Ok(())
    }

    /// Parse a config file body. Keys not present keep their defaults;
    /// `#` starts a comment line.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Config::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                MhstError::Config(format!("line {}: expected `key = value`", lineno + 1))
            })?;
            cfg.set(key.trim(), value.trim())
                .map_err(|e| MhstError::Config(format!("line {}: {e}", lineno + 1)))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let w = &self.loss_weights;
        let _ = writeln!(out, "alpha = {}", self.alpha);
        let _ = writeln!(out, "tau = {}", self.tau);
        let _ = writeln!(out, "lambda1 = {}", self.lambda1);
        let _ = writeln!(out, "lambda2 = {}", self.lambda2);
        let _ = writeln!(out, "L = {}", self.scan_period);
        let _ = writeln!(out, "K = {}", self.top_k);
        let _ = writeln!(out, "beta = {}", self.beta);
        let _ = writeln!(out, "merge_stop_threshold = {}", self.merge_stop_threshold);
        let _ = writeln!(out, "loss_weights = {}, {}, {}", w[0], w[1], w[2]);
        let _ = writeln!(out, "learning_rate = {}", self.learning_rate);
        let _ = writeln!(out, "lr_decay_factor = {}", self.lr_decay_factor);
        let _ = writeln!(out, "lr_decay_every = {}", self.lr_decay_every);
        let _ = writeln!(out, "seed = {}", self.seed);
        let _ = writeln!(out, "downweight_once = {}", self.downweight_once);
        let _ = writeln!(out, "pruning = {}", self.pruning);
        let _ = writeln!(out, "fps = {}", self.fps);
        out
    }
}

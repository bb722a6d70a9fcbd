use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// How text reaches the queries before decoding.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SgmVariant {
    /// Self-attention over all queries, then cross-attention to the text.
    Full,
    /// Only detect queries pass through the module; track queries bypass it.
    OnlyDet,
    /// Cross-attention to the text without the self-attention stage.
    OnlyCrossAttn,
    /// No guidance module at all.
    None,
}

/// Referring head on top of the decoder output.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReferHead {
    /// Cosine between a linear map of each query and the pooled frozen text.
    Scb,
    /// Plain feed-forward score from the query alone.
    Ffn,
    /// MLP over the query concatenated with the pooled trainable text.
    ConcatMlp,
    /// Cross-attention from the query to the trainable text, then a linear score.
    CrossAttn,
    /// Cosine against the pooled trainable text instead of the frozen one.
    Contrast,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrackerConfig {
    pub d_model: usize,
    pub n_det: usize,
    pub heads: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub ffn_dim: usize,
    /// Feature grid (columns, rows).
    pub grid: (usize, usize),
    /// Palette size the color one-hot block is built for.
    pub num_colors: usize,
    /// Width of the frozen text embedding.
    pub frozen_dim: usize,
    /// Hash buckets for words outside the fixed grammar vocabulary.
    pub oov_buckets: usize,
    pub beta_ref: f64,
    pub denoise_groups: usize,
    pub denoise_variance: f64,
    pub tau_det: f64,
    pub miss_patience: usize,
    /// New detections overlapping a live track by more than this IoU are
    /// suppressed at inference.
    pub dedup_iou: f64,
    /// Let overlapping detections refresh track boxes at inference.
    pub track_refresh: bool,
    pub lambda_cls: f64,
    pub lambda_l1: f64,
    pub lambda_giou: f64,
    pub lambda_ref: f64,
    pub focal_alpha: f64,
    pub focal_gamma: f64,
    /// Width, relative to the reference box, of the Gaussian locality prior
    /// on decoder cross-attention; `0` disables it.
    pub locality: f64,
    /// Fraction of a track's last displacement added to its reference box
    /// for the next frame (constant-velocity prior); `0` disables it.
    pub motion: f64,
    pub sgm: SgmVariant,
    pub refer_head: ReferHead,
    /// Seed for parameter initialization and the frozen embedder.
    pub init_seed: u64,
}

impl Default for TrackerConfig {
    fn default() -> Self {
        Self {
            d_model: 64,
            n_det: 30,
            heads: 4,
            encoder_layers: 2,
            decoder_layers: 2,
            ffn_dim: 128,
            grid: (16, 12),
            num_colors: 4,
            frozen_dim: 48,
            oov_buckets: 16,
            beta_ref: 0.5,
            denoise_groups: 3,
            denoise_variance: 0.3,
            tau_det: 0.5,
            miss_patience: 5,
            dedup_iou: 0.5,
            track_refresh: false,
            lambda_cls: 2.0,
            lambda_l1: 5.0,
            lambda_giou: 2.0,
            lambda_ref: 2.0,
            focal_alpha: 0.25,
            focal_gamma: 2.0,
            locality: 1.0,
            motion: 0.0,
            sgm: SgmVariant::Full,
            refer_head: ReferHead::Scb,
            init_seed: 0,
        }
    }
}

impl TrackerConfig {
    pub fn validate(&self) -> Result<()> {
        let pos = |v: usize, f: &str| {
            if v == 0 {
                Err(Error::config(f, "must be positive"))
            } else {
                Ok(())
            }
        };
        pos(self.d_model, "d_model")?;
        pos(self.n_det, "n_det")?;
        pos(self.heads, "heads")?;
        pos(self.ffn_dim, "ffn_dim")?;
        pos(self.grid.0, "grid")?;
        pos(self.grid.1, "grid")?;
        pos(self.denoise_groups, "denoise_groups")?;
        pos(self.miss_patience, "miss_patience")?;
        if self.d_model % self.heads != 0 {
            return Err(Error::config("heads", format!("d_model {} not divisible by {}", self.d_model, self.heads)));
        }
        if self.d_model % 4 != 0 {
            return Err(Error::config("d_model", "must be a multiple of 4 (2-D positional encoding)"));
        }
        if !(self.beta_ref > 0.0 && self.beta_ref < 1.0) {
            return Err(Error::config("beta_ref", "must lie in (0, 1)"));
        }
        if !(self.tau_det > 0.0 && self.tau_det < 1.0) {
            return Err(Error::config("tau_det", "must lie in (0, 1)"));
        }
        if !(self.denoise_variance >= 0.0) {
            return Err(Error::config("denoise_variance", "must be nonnegative"));
        }
        for (v, f) in [
            (self.lambda_cls, "lambda_cls"),
            (self.lambda_l1, "lambda_l1"),
            (self.lambda_giou, "lambda_giou"),
            (self.lambda_ref, "lambda_ref"),
            (self.focal_gamma, "focal_gamma"),
            (self.focal_alpha, "focal_alpha"),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::config(f, "must be a finite nonnegative number"));
            }
        }
        if self.frozen_dim < super::text::fixed_vocab_len() + self.oov_buckets {
            return Err(Error::config(
                "frozen_dim",
                format!(
                    "must be at least the vocabulary size {} so word vectors can be orthonormal",
                    super::text::fixed_vocab_len() + self.oov_buckets
                ),
            ));
        }
        if !(self.locality >= 0.0 && self.locality.is_finite()) {
            return Err(Error::config("locality", "must be finite and non-negative"));
        }
        if !(0.0..=1.0).contains(&self.motion) {
            return Err(Error::config("motion", "must lie in [0, 1]"));
        }
        Ok(())
    }

    /// Channels of the feature grid this model reads.
    pub fn feature_channels(&self) -> usize {
        1 + crate::scenesim::Category::ALL.len() + self.num_colors + 2
    }

    pub fn from_toml_str(s: &str) -> Result<Self> {
        let c: Self = toml::from_str(s).map_err(|e| Error::config("tracker", e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&s)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

/// Optimization settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub seed: u64,
    pub steps: usize,
    pub clip_len: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub grad_clip: f64,
    /// Probability of erasing each propagated track query during training.
    pub track_drop: f64,
    /// Log the running loss every this many steps (0 = never).
    pub log_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            steps: 2000,
            clip_len: 4,
            lr: 1e-3,
            weight_decay: 1e-4,
            grad_clip: 1.0,
            track_drop: 0.2,
            log_every: 100,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.clip_len == 0 {
            return Err(Error::config("clip_len", "must be positive"));
        }
        if !(self.lr >= 0.0) {
            return Err(Error::config("lr", "must be nonnegative"));
        }
        if !(self.grad_clip > 0.0) {
            return Err(Error::config("grad_clip", "must be positive"));
        }
        if !(0.0..1.0).contains(&self.track_drop) {
            return Err(Error::config("track_drop", "must lie in [0, 1)"));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::config("weight_decay", "must be nonnegative"));
        }
        Ok(())
    }

    pub fn from_toml_str(s: &str) -> Result<Self> {
        let c: Self = toml::from_str(s).map_err(|e| Error::config("train", e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&s)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

/// Tracker and optimizer settings of one training run: a TOML file with
/// `[tracker]` and `[train]` tables.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub tracker: TrackerConfig,
    pub train: TrainConfig,
}

impl RunConfig {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        let c: Self = toml::from_str(s).map_err(|e| Error::config("run", e.to_string()))?;
        c.tracker.validate()?;
        c.train.validate()?;
        Ok(c)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&s)
    }
}

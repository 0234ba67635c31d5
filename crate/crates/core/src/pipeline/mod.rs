//! Training, evaluation and checkpointing for the full localizer.

mod checkpoint;
mod eval;
mod model;
mod train;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::augment::AugmentConfig;
use crate::bev::{render, BevConfig, BevImage};
use crate::diffusion::{DenoiserConfig, ScheduleKind};
use crate::error::{Error, Result};
use crate::feature_net::FeatureNetConfig;
use crate::synthworld::FrameRecord;

pub use checkpoint::{Checkpoint, CheckpointHeader, RngState, TensorIndex, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use eval::{evaluate, summarize, yaw_error_deg, EvalOptions, EvalReport, FrameResult, SuccessThresholds};
pub use model::LocModel;
pub use train::{train, TrainOptions, TrainSummary};

/// Architecture and preprocessing settings shared by training and
/// inference.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub bev: BevConfig,
    pub feature: FeatureNetConfig,
    pub denoiser: DenoiserConfig,
    pub diffusion_steps: usize,
    pub schedule: ScheduleKind,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            bev: BevConfig::default(),
            feature: FeatureNetConfig::default(),
            denoiser: DenoiserConfig::default(),
            diffusion_steps: 100,
            schedule: ScheduleKind::Cosine,
        }
    }
}

impl ModelConfig {
    /// Small model that trains on one CPU core in minutes: a 51.2 m window
    /// at 1.6 m cells, four rotations and 64-wide features.
    pub fn desk() -> Self {
        ModelConfig {
            bev: BevConfig {
                half_window: 25.6,
                grid_resolution: 1.6,
                density_clamp: 10,
                output_side: 32,
                z_range: None,
            },
            feature: FeatureNetConfig {
                input_side: 32,
                rotation_count: 4,
                backbone_widths: [8, 8, 16, 16],
                patch_size: (2, 2),
                vit_dim: 64,
                vit_depth: 2,
                vit_heads: 4,
                vit_mlp_ratio: 2,
                output_dim: 64,
                ..FeatureNetConfig::default()
            },
            denoiser: DenoiserConfig {
                layers: 2,
                heads: 4,
                latent_dim: 64,
                sequence_len: 3,
                step_embed_dim: 32,
                feature_dim: 64,
                mlp_ratio: 2,
            },
            diffusion_steps: 100,
            schedule: ScheduleKind::Cosine,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.bev.validate()?;
        self.feature.validate()?;
        self.denoiser.validate()?;
        if self.bev.output_side != self.feature.input_side {
            return Err(Error::InvalidConfig(format!(
                "BEV output side {} differs from feature input side {}",
                self.bev.output_side, self.feature.input_side
            )));
        }
        if self.feature.output_dim != self.denoiser.feature_dim {
            return Err(Error::InvalidConfig(format!(
                "feature output_dim {} differs from denoiser feature_dim {}",
                self.feature.output_dim, self.denoiser.feature_dim
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub warmup_epochs: usize,
    pub peak_lr: f64,
    pub weight_decay: f64,
    pub tuple_len: usize,
    pub tuple_spacing: usize,
    /// Train on every `anchor_stride`-th tuple only.
    pub anchor_stride: usize,
    pub seed: u64,
    pub augment: AugmentConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 150,
            batch_size: 16,
            warmup_epochs: 5,
            peak_lr: 5e-4,
            weight_decay: 1e-2,
            tuple_len: 3,
            tuple_spacing: 2,
            anchor_stride: 1,
            seed: 0,
            augment: AugmentConfig::default(),
        }
    }
}

impl TrainConfig {
    /// Training settings paired with [`ModelConfig::desk`].
    pub fn desk() -> Self {
        TrainConfig {
            epochs: 40,
            warmup_epochs: 1,
            peak_lr: 2e-3,
            ..TrainConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.epochs == 0 || self.warmup_epochs >= self.epochs {
            return bad(format!(
                "need warmup_epochs < epochs, got {} and {}",
                self.warmup_epochs, self.epochs
            ));
        }
        if self.batch_size == 0 || self.tuple_len == 0 || self.tuple_spacing == 0 || self.anchor_stride == 0 {
            return bad("batch_size, tuple_len, tuple_spacing and anchor_stride must be >= 1".into());
        }
        if !(self.peak_lr.is_finite() && self.peak_lr > 0.0) {
            return bad(format!("peak_lr must be > 0, got {}", self.peak_lr));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return bad(format!("weight_decay must be >= 0, got {}", self.weight_decay));
        }
        self.augment.validate()
    }
}

/// Frame indices of one tuple, oldest first; the last one is the anchor.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SequenceSample {
    pub indices: Vec<usize>,
}

impl SequenceSample {
    pub fn anchor(&self) -> usize {
        *self.indices.last().expect("tuples are never empty")
    }
}

/// One tuple `(i − (N−1)·s, …, i − s, i)` per anchor `i ≥ (N−1)·s`.
pub fn make_tuples(frame_count: usize, n: usize, spacing: usize) -> Result<Vec<SequenceSample>> {
    if n == 0 {
        return Err(Error::InvalidArgument("tuple length must be >= 1".into()));
    }
    let span = (n - 1) * spacing;
    if frame_count < span + 1 {
        return Err(Error::InvalidArgument(format!(
            "{frame_count} frames cannot hold a tuple of {n} frames spaced {spacing} apart"
        )));
    }
    Ok((span..frame_count)
        .map(|i| SequenceSample {
            indices: (0..n).map(|j| i - (n - 1 - j) * spacing).collect(),
        })
        .collect())
}

/// Raw BEV image of every frame, tagged with its ground-truth pose.
pub fn render_frames(frames: &[FrameRecord], bev: &BevConfig) -> Result<Vec<BevImage>> {
    frames.par_iter().map(|f| render(&f.cloud, bev, Some(f.pose))).collect()
}

use std::path::PathBuf;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use super::checkpoint::{Checkpoint, RngState};
use super::model::LocModel;
use super::{make_tuples, render_frames, SequenceSample, TrainConfig};
use crate::augment::{augment_view, stitch_local_map};
use crate::bev::BevImage;
use crate::diffusion::DiffPose;
use crate::error::{Error, Result};
use crate::geometry::{PointCloud, Pose2};
use crate::nn::{AdamW, Gradients, Graph, WarmupCosine};
use crate::seed;
use crate::synthworld::Dataset;

#[derive(Debug, Clone, Default)]
pub struct TrainOptions {
    /// Rewritten at the end of every epoch.
    pub checkpoint: Option<PathBuf>,
    /// Written when the loss turns non-finite.
    pub diagnostic: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainSummary {
    /// Mean loss of every epoch.
    pub loss_history: Vec<f64>,
    /// Loss of every optimizer step.
    pub step_losses: Vec<f64>,
    pub steps: usize,
    pub schedule: WarmupCosine,
}

struct Sample {
    images: Vec<BevImage>,
    poses: Vec<Pose2>,
    k: usize,
    eps: Vec<DiffPose>,
}

fn build_sample(
    model: &LocModel,
    ds: &Dataset,
    raw: &[BevImage],
    tuple: &SequenceSample,
    cfg: &TrainConfig,
    counters: &[u64],
) -> Result<Sample> {
    let mut rng = seed::rng(cfg.seed, counters);
    let bev = &model.config().bev;
    let aug = &cfg.augment;
    let mut images = Vec::with_capacity(tuple.indices.len());
    let mut poses = Vec::with_capacity(tuple.indices.len());
    for &i in &tuple.indices {
        let apply = rng.random::<f64>() < aug.apply_probability;
        let view_seed: u64 = rng.random();
        let anchor = ds.frames[i].pose;
        let mut view = None;
        if apply {
            let window = aug.window(i, ds.frames.len());
            let frames: Vec<(&PointCloud, Pose2)> = window
                .iter()
                .map(|&j| (&ds.frames[j].cloud, ds.frames[j].pose))
                .collect();
            let map = stitch_local_map(&frames, &anchor, bev.grid_resolution)?;
            match augment_view(&map, &anchor, aug, bev, view_seed) {
                Ok(img) => view = Some(img),
                Err(Error::SparseView { .. }) => {}
                Err(e) => return Err(e),
            }
        }
        match view {
            Some(img) => {
                poses.push(img.frame_pose().expect("virtual views carry their pose"));
                images.push(img);
            }
            None => {
                poses.push(anchor);
                images.push(raw[i].clone());
            }
        }
    }
    let k = rng.random_range(1..=model.schedule().steps());
    let eps = (0..tuple.indices.len())
        .map(|_| DiffPose(std::array::from_fn(|_| StandardNormal.sample(&mut rng))))
        .collect();
    Ok(Sample { images, poses, k, eps })
}

fn tuple_grads(model: &LocModel, s: &Sample) -> Result<(f64, Gradients)> {
    let mut g = Graph::new(model.store());
    let refs: Vec<&BevImage> = s.images.iter().collect();
    let loss = model.tuple_loss(&mut g, &refs, &s.poses, s.k, &s.eps)?;
    let value = g.value(loss).data()[0];
    Ok((value, g.backward(loss)?.into_params()))
}

/// Minimizes the ε-prediction loss over the tuples of `ds`.
///
/// Each tuple draws its augmentation, shared step `k` and per-frame noise
/// from a stream keyed by `(seed, epoch, tuple)`, so results do not depend
/// on processing order.
pub fn train(model: &mut LocModel, ds: &Dataset, cfg: &TrainConfig, opts: &TrainOptions) -> Result<TrainSummary> {
    cfg.validate()?;
    let n = model.config().denoiser.sequence_len;
    if cfg.tuple_len != n {
        return Err(Error::InvalidConfig(format!(
            "train tuple_len {} differs from the denoiser sequence_len {n}",
            cfg.tuple_len
        )));
    }
    let tuples: Vec<SequenceSample> = make_tuples(ds.frames.len(), n, cfg.tuple_spacing)?
        .into_iter()
        .step_by(cfg.anchor_stride)
        .collect();
    let raw = render_frames(&ds.frames, &model.config().bev)?;
    let steps_per_epoch = tuples.len().div_ceil(cfg.batch_size);
    let schedule = WarmupCosine {
        peak: cfg.peak_lr,
        warmup: cfg.warmup_epochs * steps_per_epoch,
        total: cfg.epochs * steps_per_epoch,
    };
    let mut opt = AdamW::new(model.store(), cfg.weight_decay);
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut step_losses = Vec::with_capacity(cfg.epochs * steps_per_epoch);
    let mut step = 0usize;
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..tuples.len()).collect();
        order.shuffle(&mut seed::rng(cfg.seed, &[epoch as u64, u64::MAX]));
        let mut epoch_loss = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let mut grads = Gradients::zeros_like(model.store());
            let mut batch_loss = 0.0;
            for &t in batch {
                let sample = build_sample(model, ds, &raw, &tuples[t], cfg, &[epoch as u64, t as u64])?;
                let (loss, g) = tuple_grads(model, &sample)?;
                batch_loss += loss / batch.len() as f64;
                grads.accumulate(&g, 1.0 / batch.len() as f64);
            }
            step += 1;
            if !batch_loss.is_finite() || !grads.all_finite() {
                let snapshot = match &opts.diagnostic {
                    Some(p) => {
                        let rng = RngState {
                            seed: cfg.seed,
                            step: step as u64,
                        };
                        Checkpoint::from_model(model, Some(cfg), rng, epoch, &history).save(p)?;
                        Some(p.clone())
                    }
                    None => None,
                };
                return Err(Error::NonFiniteLoss {
                    loss: batch_loss,
                    epoch,
                    step,
                    snapshot,
                });
            }
            opt.step(model.store_mut(), &grads, schedule.lr(step));
            step_losses.push(batch_loss);
            epoch_loss += batch_loss * batch.len() as f64;
        }
        let mean = epoch_loss / tuples.len() as f64;
        history.push(mean);
        log::info!(
            "epoch {}/{}: loss {mean:.5}, lr {:.2e}",
            epoch + 1,
            cfg.epochs,
            schedule.lr(step)
        );
        if let Some(p) = &opts.checkpoint {
            let rng = RngState {
                seed: cfg.seed,
                step: step as u64,
            };
            Checkpoint::from_model(model, Some(cfg), rng, epoch + 1, &history).save(p)?;
        }
    }
    Ok(TrainSummary {
        loss_history: history,
        step_losses,
        steps: step,
        schedule,
    })
}

//! Conditional diffusion over normalized planar poses.
//!
//! Poses are encoded as `(x̃, ỹ, cos yaw, sin yaw)` with positions mapped
//! affinely to `[-1, 1]`. A transformer denoiser predicts the injected
//! noise for a whole frame sequence given per-frame global descriptors,
//! and deterministic DDIM steps walk from pure noise back to poses.

use std::f64::consts::PI;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Pose2;
use crate::nn::{Encoder, Graph, Init, Linear, ParamId, ParamStore, Tensor, Var};

const COSINE_OFFSET: f64 = 0.008;
const MAX_BETA: f64 = 0.999;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleKind {
    Cosine,
    Linear,
}

impl std::str::FromStr for ScheduleKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cosine" => Ok(ScheduleKind::Cosine),
            "linear" => Ok(ScheduleKind::Linear),
            other => Err(Error::InvalidArgument(format!(
                "unknown schedule kind {other:?} (expected cosine or linear)"
            ))),
        }
    }
}

/// Variance schedule `β_1..β_K` with cumulative products `ᾱ_0..ᾱ_K`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    kind: ScheduleKind,
    betas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    pub fn build(steps: usize, kind: ScheduleKind) -> Result<Self> {
        if steps < 2 {
            return Err(Error::InvalidArgument(format!(
                "diffusion needs at least 2 steps, got {steps}"
            )));
        }
        let k_total = steps as f64;
        let betas: Vec<f64> = match kind {
            ScheduleKind::Cosine => {
                let f = |k: f64| {
                    let c = ((k / k_total + COSINE_OFFSET) / (1.0 + COSINE_OFFSET) * PI / 2.0).cos();
                    c * c
                };
                let f0 = f(0.0);
                (1..=steps)
                    .map(|k| {
                        let prev = f((k - 1) as f64) / f0;
                        let cur = f(k as f64) / f0;
                        (1.0 - cur / prev).min(MAX_BETA)
                    })
                    .collect()
            }
            ScheduleKind::Linear => {
                let lo = 1e-4 * 1000.0 / k_total;
                let hi = 0.02 * 1000.0 / k_total;
                (0..steps)
                    .map(|i| lo + (hi - lo) * i as f64 / (steps - 1) as f64)
                    .collect()
            }
        };
        Self::from_betas(kind, betas)
    }

    fn from_betas(kind: ScheduleKind, betas: Vec<f64>) -> Result<Self> {
        if let Some((i, b)) = betas.iter().enumerate().find(|(_, b)| !(**b > 0.0 && **b < 1.0)) {
            return Err(Error::InvalidConfig(format!(
                "{kind:?} schedule with K={} has beta_{} = {b}, outside (0, 1)",
                betas.len(),
                i + 1
            )));
        }
        let mut alpha_bars = Vec::with_capacity(betas.len() + 1);
        alpha_bars.push(1.0);
        for b in &betas {
            let last = *alpha_bars.last().unwrap();
            alpha_bars.push(last * (1.0 - b));
        }
        let last = *alpha_bars.last().unwrap();
        if last >= 0.05 {
            return Err(Error::InvalidConfig(format!(
                "{kind:?} schedule with K={} ends at alpha_bar {last}, not below 0.05",
                betas.len()
            )));
        }
        Ok(NoiseSchedule {
            kind,
            betas,
            alpha_bars,
        })
    }

    pub fn kind(&self) -> ScheduleKind {
        self.kind
    }

    /// Total step count `K`.
    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    /// `β_k` for `1 ≤ k ≤ K`.
    pub fn beta(&self, k: usize) -> f64 {
        self.betas[k - 1]
    }

    pub fn alpha(&self, k: usize) -> f64 {
        1.0 - self.beta(k)
    }

    /// `ᾱ_k` for `0 ≤ k ≤ K`, with `ᾱ_0 = 1`.
    pub fn alpha_bar(&self, k: usize) -> f64 {
        self.alpha_bars[k]
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    fn check_step(&self, k: usize, allow_zero: bool) -> Result<()> {
        if k > self.steps() || (k == 0 && !allow_zero) {
            return Err(Error::InvalidArgument(format!(
                "diffusion step {k} outside {}..={}",
                u8::from(!allow_zero),
                self.steps()
            )));
        }
        Ok(())
    }

    /// Rebuilds a schedule from stored parts, re-checking every invariant.
    pub fn validate(&self) -> Result<()> {
        let rebuilt = Self::from_betas(self.kind, self.betas.clone())?;
        if rebuilt
            .alpha_bars
            .iter()
            .zip(&self.alpha_bars)
            .any(|(a, b)| (a - b).abs() > 1e-12)
            || rebuilt.alpha_bars.len() != self.alpha_bars.len()
        {
            return Err(Error::InvalidConfig(
                "stored alpha_bar disagrees with the cumulative product of betas".into(),
            ));
        }
        Ok(())
    }
}

/// Normalized diffusion variable `(x̃, ỹ, cos yaw, sin yaw)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DiffPose(pub [f64; 4]);

impl DiffPose {
    pub const ZERO: DiffPose = DiffPose([0.0; 4]);

    pub fn yaw(&self) -> f64 {
        let [_, _, c, s] = self.0;
        if c == 0.0 && s == 0.0 {
            0.0
        } else {
            s.atan2(c)
        }
    }
}

/// Affine map from a world bounding box (plus margin) onto `[-1, 1]²`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PoseNormalizer {
    pub min_x: f64,
    pub max_x: f64,
    pub min_y: f64,
    pub max_y: f64,
}

impl PoseNormalizer {
    pub const MARGIN: f64 = 0.05;
    const MIN_SPAN: f64 = 1.0;

    /// Bounding box of `poses` widened by 5% of its span on every side.
    pub fn fit(poses: &[Pose2]) -> Result<Self> {
        if poses.is_empty() {
            return Err(Error::InvalidArgument("cannot fit a normalizer to zero poses".into()));
        }
        let (mut lx, mut hx, mut ly, mut hy) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
        for p in poses {
            lx = lx.min(p.x());
            hx = hx.max(p.x());
            ly = ly.min(p.y());
            hy = hy.max(p.y());
        }
        let widen = |lo: f64, hi: f64| {
            let span = (hi - lo).max(Self::MIN_SPAN);
            let mid = 0.5 * (lo + hi);
            let half = 0.5 * span * (1.0 + 2.0 * Self::MARGIN);
            (mid - half, mid + half)
        };
        let (min_x, max_x) = widen(lx, hx);
        let (min_y, max_y) = widen(ly, hy);
        Ok(PoseNormalizer {
            min_x,
            max_x,
            min_y,
            max_y,
        })
    }

    pub fn validate(&self) -> Result<()> {
        let ok = [self.min_x, self.max_x, self.min_y, self.max_y]
            .iter()
            .all(|v| v.is_finite())
            && self.max_x > self.min_x
            && self.max_y > self.min_y;
        if !ok {
            return Err(Error::InvalidConfig(format!("degenerate pose normalizer {self:?}")));
        }
        Ok(())
    }

    pub fn encode(&self, p: &Pose2) -> DiffPose {
        let nx = 2.0 * (p.x() - self.min_x) / (self.max_x - self.min_x) - 1.0;
        let ny = 2.0 * (p.y() - self.min_y) / (self.max_y - self.min_y) - 1.0;
        DiffPose([nx, ny, p.yaw().cos(), p.yaw().sin()])
    }

    pub fn decode(&self, d: &DiffPose) -> Result<Pose2> {
        let x = self.min_x + 0.5 * (d.0[0] + 1.0) * (self.max_x - self.min_x);
        let y = self.min_y + 0.5 * (d.0[1] + 1.0) * (self.max_y - self.min_y);
        Pose2::try_new(x, y, d.yaw())
    }
}

/// `t_k = √ᾱ_k·t_0 + √(1−ᾱ_k)·ε`, frame by frame.
pub fn add_noise(t0: &[DiffPose], k: usize, eps: &[DiffPose], s: &NoiseSchedule) -> Result<Vec<DiffPose>> {
    s.check_step(k, false)?;
    check_len("add_noise", t0.len(), eps.len())?;
    let a = s.alpha_bar(k).sqrt();
    let b = (1.0 - s.alpha_bar(k)).sqrt();
    Ok(t0
        .iter()
        .zip(eps)
        .map(|(t, e)| DiffPose(std::array::from_fn(|i| a * t.0[i] + b * e.0[i])))
        .collect())
}

/// Sinusoidal embedding `(sin ω_0 k, cos ω_0 k, sin ω_1 k, …)` with
/// `ω_i = 10000^{−2i/dim}`.
pub fn step_embedding(k: usize, dim: usize) -> Result<Vec<f64>> {
    if !dim.is_multiple_of(2) || dim == 0 {
        return Err(Error::InvalidArgument(format!(
            "step embedding dimension must be even and positive, got {dim}"
        )));
    }
    let mut out = Vec::with_capacity(dim);
    for i in 0..dim / 2 {
        let w = 10000f64.powf(-2.0 * i as f64 / dim as f64);
        let a = k as f64 * w;
        out.push(a.sin());
        out.push(a.cos());
    }
    Ok(out)
}

/// One deterministic DDIM update from step `k` to `k_prev`.
///
/// With `clip = Some(b)` the predicted clean pose is clamped to `[-b, b]`
/// and the noise estimate re-derived from the clamped value before
/// stepping. Encoded poses live in `[-1, 1]`, so `Some(1.0)` leaves exact
/// predictions untouched.
pub fn ddim_step(
    tk: &[DiffPose],
    eps_hat: &[DiffPose],
    k: usize,
    k_prev: usize,
    s: &NoiseSchedule,
    clip: Option<f64>,
) -> Result<Vec<DiffPose>> {
    s.check_step(k, false)?;
    if k_prev >= k {
        return Err(Error::InvalidArgument(format!(
            "DDIM needs k_prev < k, got k={k}, k_prev={k_prev}"
        )));
    }
    check_len("ddim_step", tk.len(), eps_hat.len())?;
    let ab = s.alpha_bar(k);
    let ab_prev = s.alpha_bar(k_prev);
    let (sa, sb) = (ab.sqrt(), (1.0 - ab).sqrt());
    let (pa, pb) = (ab_prev.sqrt(), (1.0 - ab_prev).sqrt());
    Ok(tk
        .iter()
        .zip(eps_hat)
        .map(|(t, e)| {
            DiffPose(std::array::from_fn(|i| {
                let x0 = (t.0[i] - sb * e.0[i]) / sa;
                match clip {
                    Some(b) if x0.abs() > b => {
                        let x0 = x0.clamp(-b, b);
                        pa * x0 + pb * (t.0[i] - sa * x0) / sb
                    }
                    _ => pa * x0 + pb * e.0[i],
                }
            }))
        })
        .collect())
}

/// Uniformly strided visiting order `K = k_0 > k_1 > … > k_steps = 0`.
pub fn ddim_timesteps(total: usize, steps: usize) -> Result<Vec<usize>> {
    if steps == 0 || steps > total {
        return Err(Error::InvalidArgument(format!(
            "sampling steps must be in 1..={total}, got {steps}"
        )));
    }
    Ok((0..=steps)
        .map(|j| ((total * (steps - j)) as f64 / steps as f64).round() as usize)
        .collect())
}

/// Anything that predicts `ε̂` for a noisy sequence at step `k`.
pub trait EpsilonModel {
    fn predict(&self, noisy: &[DiffPose], k: usize) -> Result<Vec<DiffPose>>;
}

/// Samples `n` frames: Gaussian start at `K`, then DDIM down to 0.
pub fn ddim_sample<M: EpsilonModel + ?Sized>(
    model: &M,
    n: usize,
    steps: usize,
    s: &NoiseSchedule,
    seed: u64,
    clip: Option<f64>,
) -> Result<Vec<DiffPose>> {
    let ks = ddim_timesteps(s.steps(), steps)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut t: Vec<DiffPose> = (0..n)
        .map(|_| DiffPose(std::array::from_fn(|_| StandardNormal.sample(&mut rng))))
        .collect();
    for w in ks.windows(2) {
        let eps = model.predict(&t, w[0])?;
        check_len("epsilon model output", n, eps.len())?;
        t = ddim_step(&t, &eps, w[0], w[1], s, clip)?;
    }
    Ok(t)
}

/// Mean absolute error over every frame and coordinate.
pub fn epsilon_loss(eps_hat: &[DiffPose], eps: &[DiffPose]) -> Result<f64> {
    check_len("epsilon_loss", eps.len(), eps_hat.len())?;
    if eps.is_empty() {
        return Err(Error::InvalidArgument("epsilon_loss over an empty sequence".into()));
    }
    let total: f64 = eps_hat
        .iter()
        .zip(eps)
        .flat_map(|(a, b)| (0..4).map(move |i| (a.0[i] - b.0[i]).abs()))
        .sum();
    Ok(total / (4 * eps.len()) as f64)
}

fn check_len(context: &str, expected: usize, actual: usize) -> Result<()> {
    if expected != actual {
        return Err(Error::ShapeMismatch {
            context: context.into(),
            expected: vec![expected, 4],
            actual: vec![actual, 4],
        });
    }
    Ok(())
}

/// `[N, 4]` tensor of a pose sequence.
pub fn poses_tensor(p: &[DiffPose]) -> Tensor {
    Tensor::from_parts(vec![p.len(), 4], p.iter().flat_map(|d| d.0).collect())
}

pub fn tensor_poses(t: &Tensor) -> Result<Vec<DiffPose>> {
    match t.shape() {
        [_, 4] => Ok(t
            .data()
            .chunks_exact(4)
            .map(|c| DiffPose([c[0], c[1], c[2], c[3]]))
            .collect()),
        s => Err(Error::ShapeMismatch {
            context: "pose tensor".into(),
            expected: vec![s.first().copied().unwrap_or(0), 4],
            actual: s.to_vec(),
        }),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DenoiserConfig {
    pub layers: usize,
    pub heads: usize,
    pub latent_dim: usize,
    pub sequence_len: usize,
    pub step_embed_dim: usize,
    /// Width of the per-frame conditioning descriptor.
    pub feature_dim: usize,
    pub mlp_ratio: usize,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        DenoiserConfig {
            layers: 8,
            heads: 4,
            latent_dim: 512,
            sequence_len: 3,
            step_embed_dim: 128,
            feature_dim: 512,
            mlp_ratio: 4,
        }
    }
}

impl DenoiserConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.heads == 0 || self.latent_dim == 0 || !self.latent_dim.is_multiple_of(self.heads) {
            return bad(format!(
                "latent_dim {} must be divisible by heads {}",
                self.latent_dim, self.heads
            ));
        }
        if self.sequence_len == 0 {
            return bad("sequence_len must be positive".into());
        }
        if self.step_embed_dim == 0 || !self.step_embed_dim.is_multiple_of(2) {
            return bad(format!("step_embed_dim must be even, got {}", self.step_embed_dim));
        }
        if self.feature_dim == 0 || self.mlp_ratio == 0 {
            return bad("feature_dim and mlp_ratio must be positive".into());
        }
        Ok(())
    }
}

/// Transformer that maps a noisy pose sequence plus descriptors to `ε̂`.
#[derive(Debug, Clone)]
pub struct Denoiser {
    cfg: DenoiserConfig,
    embed: Linear,
    frame_pos: ParamId,
    encoder: Encoder,
    head: Linear,
}

impl Denoiser {
    pub fn new(cfg: &DenoiserConfig, store: &mut ParamStore, init: &mut Init, name: &str) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.latent_dim;
        let fan_in = 4 + cfg.step_embed_dim + cfg.feature_dim;
        Ok(Denoiser {
            cfg: cfg.clone(),
            embed: Linear::new(store, init, &format!("{name}.embed"), fan_in, d, true),
            frame_pos: store.add(
                format!("{name}.frame_pos"),
                init.normal(&[cfg.sequence_len, d], 0.02),
                false,
            ),
            encoder: Encoder::new(
                store,
                init,
                &format!("{name}.encoder"),
                d,
                cfg.layers,
                cfg.heads,
                d * cfg.mlp_ratio,
            ),
            head: Linear::new(store, init, &format!("{name}.head"), d, 4, true),
        })
    }

    pub fn config(&self) -> &DenoiserConfig {
        &self.cfg
    }

    pub fn frame_pos(&self) -> ParamId {
        self.frame_pos
    }

    /// `noisy: [N, 4]`, `feats: [N, feature_dim]` → `ε̂: [N, 4]`.
    pub fn forward(&self, g: &mut Graph, noisy: Var, k: usize, feats: Var) -> Result<Var> {
        let n = self.cfg.sequence_len;
        let expect = |g: &Graph, v: Var, cols: usize, what: &str| -> Result<()> {
            if g.shape(v) != [n, cols] {
                return Err(Error::ShapeMismatch {
                    context: format!("denoiser {what}"),
                    expected: vec![n, cols],
                    actual: g.shape(v).to_vec(),
                });
            }
            Ok(())
        };
        expect(g, noisy, 4, "noisy poses")?;
        expect(g, feats, self.cfg.feature_dim, "features")?;
        let e = step_embedding(k, self.cfg.step_embed_dim)?;
        let rows: Vec<f64> = (0..n).flat_map(|_| e.iter().copied()).collect();
        let step = g.input(Tensor::from_parts(vec![n, self.cfg.step_embed_dim], rows));
        let x = g.concat_cols(&[noisy, step, feats])?;
        let x = self.embed.forward(g, x)?;
        let pos = g.param(self.frame_pos);
        let x = g.add(x, pos)?;
        let x = self.encoder.forward(g, x)?;
        self.head.forward(g, x)
    }

    /// Inference-only prediction for fixed descriptors.
    pub fn predict(&self, store: &ParamStore, noisy: &[DiffPose], k: usize, feats: &Tensor) -> Result<Vec<DiffPose>> {
        let mut g = Graph::inference(store);
        let x = g.input(poses_tensor(noisy));
        let f = g.input(feats.clone());
        let y = self.forward(&mut g, x, k, f)?;
        tensor_poses(g.value(y))
    }
}

/// A denoiser bound to its parameters and one sequence's descriptors.
pub struct Conditioned<'a> {
    pub denoiser: &'a Denoiser,
    pub store: &'a ParamStore,
    pub feats: &'a Tensor,
}

impl EpsilonModel for Conditioned<'_> {
    fn predict(&self, noisy: &[DiffPose], k: usize) -> Result<Vec<DiffPose>> {
        self.denoiser.predict(self.store, noisy, k, self.feats)
    }
}

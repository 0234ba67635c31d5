//! Self-contained invariant checks with their own oracles.
//!
//! The acceptance suite runs these at full size; `bevloc selftest` runs
//! the [`SuiteScale::quick`] variant.

use std::f64::consts::PI;
use std::time::Instant;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::augment::{render_virtual_bev, sample_virtual_pose, AugmentConfig};
use crate::bev::{rasterize, BevConfig, BevImage};
use crate::diffusion::{
    add_noise, ddim_sample, DenoiserConfig, DiffPose, EpsilonModel, NoiseSchedule, PoseNormalizer, ScheduleKind,
};
use crate::error::Result;
use crate::feature_net::{rotate_image, FeatureNet, FeatureNetConfig};
use crate::geometry::{PointCloud, Pose2};
use crate::nn::{Graph, Init, ParamStore, Tensor};
use crate::pipeline::{yaw_error_deg, FrameResult, LocModel, ModelConfig, SuccessThresholds};
use crate::seed;

/// Outcome of one check.
#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
    pub seconds: f64,
}

impl Check {
    fn timed(name: &str, start: Instant, passed: bool, detail: String) -> Check {
        Check {
            name: name.to_string(),
            passed,
            detail,
            seconds: start.elapsed().as_secs_f64(),
        }
    }

    pub fn failed(name: &str, start: Instant, e: crate::Error) -> Check {
        Check::timed(name, start, false, format!("error: {e}"))
    }

    pub fn line(&self) -> String {
        format!(
            "{} {} ({:.1}s): {}",
            if self.passed { "PASS" } else { "FAIL" },
            self.name,
            self.seconds,
            self.detail
        )
    }
}

/// Sample counts for each check.
#[derive(Debug, Clone)]
pub struct SuiteScale {
    pub mfa: FeatureNetConfig,
    pub mfa_draws: usize,
    pub ddim_poses: usize,
    pub forward_samples: usize,
    pub raster_clouds: usize,
    pub grad_seeds: usize,
    pub offset_samples: usize,
}

impl SuiteScale {
    pub fn full() -> Self {
        SuiteScale {
            mfa: FeatureNetConfig::default(),
            mfa_draws: 20,
            ddim_poses: 1000,
            forward_samples: 100_000,
            raster_clouds: 100,
            grad_seeds: 5,
            offset_samples: 100_000,
        }
    }

    /// Seconds instead of minutes. The MFA check uses quarter turns only,
    /// where equivariance holds to rounding.
    pub fn quick() -> Self {
        SuiteScale {
            mfa: FeatureNetConfig {
                input_side: 64,
                rotation_count: 4,
                backbone_widths: [4, 8, 8, 8],
                ..FeatureNetConfig::default()
            },
            mfa_draws: 2,
            ddim_poses: 200,
            forward_samples: 20_000,
            raster_clouds: 10,
            grad_seeds: 1,
            offset_samples: 20_000,
        }
    }
}

/// Every model-free check at the given scale.
pub fn run_suite(scale: &SuiteScale, base_seed: u64) -> Vec<Check> {
    vec![
        mfa_equivariance(&scale.mfa, scale.mfa_draws, base_seed),
        ddim_oracle(scale.ddim_poses, &[10, 15, 100], base_seed),
        forward_statistics(scale.forward_samples, &[1, 50, 100], base_seed),
        raster_oracle(scale.raster_clouds, base_seed),
        gradient_checks(scale.grad_seeds, base_seed),
        augmentation_geometry(scale.offset_samples, base_seed),
        metric_cases(),
    ]
}

/// Sum of a few Gaussian blobs inside the disk of radius `0.4·side`.
pub fn smooth_image(side: usize, seed: u64) -> Tensor {
    let mut rng = seed::rng(seed, &[]);
    let c = (side as f64 - 1.0) / 2.0;
    let blobs: Vec<(f64, f64, f64, f64)> = (0..6)
        .map(|_| {
            let r = rng.random_range(0.0..0.25) * side as f64;
            let a = rng.random_range(0.0..2.0 * PI);
            let sigma = rng.random_range(0.06..0.12) * side as f64;
            (c + r * a.cos(), c + r * a.sin(), sigma, rng.random_range(0.3..1.0))
        })
        .collect();
    let mut data = vec![0.0; side * side];
    let limit = 0.4 * side as f64;
    for i in 0..side {
        for j in 0..side {
            let (y, x) = (i as f64, j as f64);
            if ((y - c).powi(2) + (x - c).powi(2)).sqrt() > limit {
                continue;
            }
            data[i * side + j] = blobs
                .iter()
                .map(|&(by, bx, s, w)| w * (-((y - by).powi(2) + (x - bx).powi(2)) / (2.0 * s * s)).exp())
                .sum::<f64>()
                .min(1.0);
        }
    }
    Tensor::new(vec![1, side, side], data).expect("consistent shape")
}

/// Largest per-pixel difference inside the centered disk of radius
/// `frac·side/2`, over every channel.
fn disk_max_diff(a: &Tensor, b: &Tensor, frac: f64) -> f64 {
    let (ch, h, w) = a.dims3();
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    let r = frac * h as f64 / 2.0;
    let mut worst = 0.0f64;
    for c in 0..ch {
        for i in 0..h {
            for j in 0..w {
                if (i as f64 - cy).hypot(j as f64 - cx) <= r {
                    let k = (c * h + i) * w + j;
                    worst = worst.max((a.data()[k] - b.data()[k]).abs());
                }
            }
        }
    }
    worst
}

/// Rotating the input commutes with the MFA feature map.
///
/// Errors off the half turn are measured relative to the largest feature
/// magnitude of the unrotated map, since random weights set the scale.
pub fn mfa_equivariance(cfg: &FeatureNetConfig, draws: usize, base_seed: u64) -> Check {
    const NAME: &str = "mfa equivariance";
    let start = Instant::now();
    let run = || -> Result<(f64, f64, f64)> {
        let (mut worst, mut worst_pi, mut scale) = (0.0f64, 0.0f64, 0.0f64);
        for d in 0..draws as u64 {
            let mut store = ParamStore::new();
            let mut init = Init::new(seed::derive(base_seed, &[1, d]));
            let net = FeatureNet::new(cfg, &mut store, &mut init, "f")?;
            let img = smooth_image(cfg.input_side, seed::derive(base_seed, &[2, d]));
            let mut g = Graph::inference(&store);
            let x = g.input(img.clone());
            let f0 = net.mfa_forward(&mut g, x)?;
            let f0 = g.value(f0).clone();
            let peak = f0.data().iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-12);
            scale = scale.max(peak);
            for r in cfg.rotation_angles().into_iter().skip(1) {
                let xr = g.input(rotate_image(&img, r)?);
                let fr = net.mfa_forward(&mut g, xr)?;
                let want = rotate_image(&f0, r)?;
                let err = disk_max_diff(g.value(fr), &want, 0.7);
                if (r - PI).abs() < 1e-12 {
                    worst_pi = worst_pi.max(err);
                } else {
                    worst = worst.max(err / peak);
                }
            }
        }
        Ok((worst, worst_pi, scale))
    };
    match run() {
        Ok((worst, worst_pi, scale)) => Check::timed(
            NAME,
            start,
            worst <= 5e-2 && worst_pi <= 1e-5,
            format!(
                "N_R={}, {draws} draws: max relative err {worst:.3e} (tol 5e-2), abs err at pi {worst_pi:.3e} (tol 1e-5), peak feature {scale:.3}",
                cfg.rotation_count
            ),
        ),
        Err(e) => Check::failed(NAME, start, e),
    }
}

/// Noise predictor that knows the clean sequence.
struct Oracle<'a> {
    t0: &'a [DiffPose],
    s: &'a NoiseSchedule,
}

impl EpsilonModel for Oracle<'_> {
    fn predict(&self, noisy: &[DiffPose], k: usize) -> Result<Vec<DiffPose>> {
        let (a, b) = (self.s.alpha_bar(k).sqrt(), (1.0 - self.s.alpha_bar(k)).sqrt());
        Ok(noisy
            .iter()
            .zip(self.t0)
            .map(|(x, t)| DiffPose(std::array::from_fn(|i| (x.0[i] - a * t.0[i]) / b)))
            .collect())
    }
}

fn random_poses(n: usize, half: f64, seed: u64) -> Vec<Pose2> {
    let mut rng = seed::rng(seed, &[]);
    (0..n)
        .map(|_| {
            Pose2::new(
                rng.random_range(-half..half),
                rng.random_range(-half..half),
                rng.random_range(-PI..PI),
            )
        })
        .collect()
}

/// Strided DDIM with a perfect noise oracle returns the clean poses.
pub fn ddim_oracle(count: usize, step_counts: &[usize], base_seed: u64) -> Check {
    const NAME: &str = "ddim oracle recovery";
    let start = Instant::now();
    let run = || -> Result<Vec<(usize, f64)>> {
        let s = NoiseSchedule::build(100, ScheduleKind::Cosine)?;
        let poses = random_poses(count, 50.0, seed::derive(base_seed, &[3]));
        let norm = PoseNormalizer::fit(&poses)?;
        let t0: Vec<DiffPose> = poses.iter().map(|p| norm.encode(p)).collect();
        let oracle = Oracle { t0: &t0, s: &s };
        let mut out = Vec::new();
        for &steps in step_counts {
            let mut worst = 0.0f64;
            for clip in [None, Some(1.0)] {
                let got = ddim_sample(&oracle, count, steps, &s, seed::derive(base_seed, &[4]), clip)?;
                for (a, b) in got.iter().zip(&t0) {
                    for i in 0..4 {
                        worst = worst.max((a.0[i] - b.0[i]).abs());
                    }
                }
            }
            out.push((steps, worst));
        }
        Ok(out)
    };
    match run() {
        Ok(errs) => {
            let passed = errs.iter().all(|&(_, e)| e <= 1e-5);
            let detail = errs
                .iter()
                .map(|(s, e)| format!("{s} steps {e:.2e}"))
                .collect::<Vec<_>>()
                .join(", ");
            Check::timed(
                NAME,
                start,
                passed,
                format!("{count} poses, max err: {detail} (tol 1e-5)"),
            )
        }
        Err(e) => Check::failed(NAME, start, e),
    }
}

/// Empirical moments of `t_k` match `N(√ᾱ t0, (1−ᾱ) I)` within 3 standard errors.
pub fn forward_statistics(samples: usize, ks: &[usize], base_seed: u64) -> Check {
    const NAME: &str = "forward process statistics";
    let start = Instant::now();
    let run = || -> Result<(bool, f64)> {
        let s = NoiseSchedule::build(100, ScheduleKind::Cosine)?;
        let t0 = [DiffPose([0.6, -0.3, 0.8, -0.6])];
        let mut rng = seed::rng(base_seed, &[5]);
        let n = samples as f64;
        let mut ok = true;
        let mut worst_z = 0.0f64;
        for &k in ks {
            let ab = s.alpha_bar(k);
            let (mut sum, mut sum2) = ([0.0; 4], [0.0; 4]);
            for _ in 0..samples {
                let eps = [DiffPose(std::array::from_fn(|_| StandardNormal.sample(&mut rng)))];
                let x = add_noise(&t0, k, &eps, &s)?;
                for i in 0..4 {
                    sum[i] += x[0].0[i];
                    sum2[i] += x[0].0[i] * x[0].0[i];
                }
            }
            let var_true = 1.0 - ab;
            for i in 0..4 {
                let mean = sum[i] / n;
                let var = (sum2[i] - n * mean * mean) / (n - 1.0);
                let z_mean = (mean - ab.sqrt() * t0[0].0[i]).abs() / (var_true / n).sqrt();
                let z_var = (var - var_true).abs() / (var_true * (2.0 / (n - 1.0)).sqrt());
                worst_z = worst_z.max(z_mean).max(z_var);
                ok &= z_mean <= 3.0 && z_var <= 3.0;
            }
        }
        Ok((ok, worst_z))
    };
    match run() {
        Ok((ok, z)) => Check::timed(
            NAME,
            start,
            ok,
            format!("k in {ks:?}, {samples} draws: worst deviation {z:.2} standard errors (tol 3)"),
        ),
        Err(e) => Check::failed(NAME, start, e),
    }
}

/// Brute-force image: cell membership by comparing against every edge.
fn brute_force_raster(cloud: &PointCloud, cfg: &BevConfig) -> Vec<f64> {
    let (l, g) = (cfg.half_window, cfg.grid_resolution);
    let n = cfg.raster_side();
    let col_edges: Vec<f64> = (0..=n).map(|c| -l + c as f64 * g).collect();
    let row_edges: Vec<f64> = (0..=n).map(|r| l - r as f64 * g).collect();
    let mut counts = vec![0u32; n * n];
    for p in cloud.points() {
        if !(p[0] >= -l && p[0] < l && p[1] > -l && p[1] <= l) {
            continue;
        }
        let col = (0..n).find(|&c| p[0] >= col_edges[c] && p[0] < col_edges[c + 1]);
        let row = (0..n).find(|&r| p[1] <= row_edges[r] && p[1] > row_edges[r + 1]);
        if let (Some(r), Some(c)) = (row, col) {
            counts[r * n + c] += 1;
        }
    }
    let clamp = |c: u32| c.min(cfg.density_clamp) as f64;
    let max = counts.iter().map(|&c| clamp(c)).fold(0.0, f64::max);
    let out = cfg.output_side;
    let off = (out - n) / 2;
    let mut img = vec![0.0; out * out];
    if max > 0.0 {
        for r in 0..n {
            for c in 0..n {
                img[(r + off) * out + c + off] = clamp(counts[r * n + c]) / max;
            }
        }
    }
    img
}

/// Random cloud over `[-extent, extent]²` with dense clusters that
/// saturate the density clamp.
pub fn random_cloud(seed: u64, n: usize, extent: f64) -> PointCloud {
    let mut rng = seed::rng(seed, &[]);
    let mut pts = Vec::with_capacity(n);
    while pts.len() < n {
        let c = [rng.random_range(-extent..extent), rng.random_range(-extent..extent)];
        let burst = if rng.random_bool(0.1) { 15 } else { 1 };
        for _ in 0..burst {
            pts.push([
                c[0] + rng.random_range(-0.05..0.05),
                c[1] + rng.random_range(-0.05..0.05),
                rng.random_range(-2.0..10.0),
            ]);
        }
    }
    PointCloud::new(pts).expect("finite points")
}

/// Cloud whose points sit at least 10% of a cell away from every edge,
/// restricted to cells `margin..side-margin`.
fn interior_cloud(seed: u64, n: usize, cfg: &BevConfig, margin: usize) -> PointCloud {
    let mut rng = seed::rng(seed, &[]);
    let (l, g) = (cfg.half_window, cfg.grid_resolution);
    let side = cfg.raster_side();
    let pts = (0..n)
        .map(|_| {
            let c = rng.random_range(margin..side - margin) as f64 + rng.random_range(0.1..0.9);
            let r = rng.random_range(margin..side - margin) as f64 + rng.random_range(0.1..0.9);
            [-l + c * g, l - r * g, rng.random_range(-2.0..10.0)]
        })
        .collect();
    PointCloud::new(pts).expect("finite points")
}

/// Rasterizer against a brute-force counter, plus shift and height invariance.
pub fn raster_oracle(clouds: usize, base_seed: u64) -> Check {
    const NAME: &str = "rasterizer oracle";
    let start = Instant::now();
    let cfg = BevConfig::default();
    let run = || -> Result<(usize, usize, usize)> {
        let (mut oracle_bad, mut shift_bad, mut z_bad) = (0, 0, 0);
        let side = cfg.raster_side();
        let (out, off) = (cfg.output_side, cfg.pad_before());
        for i in 0..clouds as u64 {
            let cloud = random_cloud(seed::derive(base_seed, &[6, i]), 3000, 1.2 * cfg.half_window);
            let img = rasterize(&cloud, &cfg)?;
            if img.pixels() != brute_force_raster(&cloud, &cfg).as_slice() {
                oracle_bad += 1;
            }

            let mut rng = seed::rng(base_seed, &[7, i]);
            let restacked: Vec<[f64; 3]> = cloud
                .points()
                .iter()
                .map(|p| [p[0], p[1], rng.random_range(-50.0..50.0)])
                .collect();
            if rasterize(&PointCloud::new(restacked)?, &cfg)?.pixels() != img.pixels() {
                z_bad += 1;
            }

            let margin = 6;
            let inner = interior_cloud(seed::derive(base_seed, &[8, i]), 1500, &cfg, margin);
            let (dc, dr) = (rng.random_range(-5i64..=5), rng.random_range(-5i64..=5));
            let g = cfg.grid_resolution;
            // Moving points by +x shifts columns right; +y shifts rows up.
            let moved: Vec<[f64; 3]> = inner
                .points()
                .iter()
                .map(|p| [p[0] + dc as f64 * g, p[1] - dr as f64 * g, p[2]])
                .collect();
            let a = rasterize(&inner, &cfg)?;
            let b = rasterize(&PointCloud::new(moved)?, &cfg)?;
            let mut ok = true;
            for r in 0..side {
                for c in 0..side {
                    // b at (r, c) shows what a showed at (r − dr, c − dc).
                    let have = b.get(r + off, c + off);
                    let src = (r as i64 - dr, c as i64 - dc);
                    let expect = if (0..side as i64).contains(&src.0) && (0..side as i64).contains(&src.1) {
                        a.get(src.0 as usize + off, src.1 as usize + off)
                    } else {
                        0.0
                    };
                    ok &= have == expect;
                }
            }
            ok &= b.side() == out;
            if !ok {
                shift_bad += 1;
            }
        }
        Ok((oracle_bad, shift_bad, z_bad))
    };
    match run() {
        Ok((o, s, z)) => Check::timed(
            NAME,
            start,
            o == 0 && s == 0 && z == 0,
            format!("{clouds} clouds: {o} oracle mismatches, {s} translation mismatches, {z} z-dependence mismatches"),
        ),
        Err(e) => Check::failed(NAME, start, e),
    }
}

/// Smallest model that exercises every layer type.
pub fn tiny_model_config() -> ModelConfig {
    ModelConfig {
        bev: BevConfig {
            half_window: 6.4,
            grid_resolution: 0.4,
            density_clamp: 10,
            output_side: 32,
            z_range: None,
        },
        feature: FeatureNetConfig {
            input_side: 32,
            rotation_count: 2,
            backbone_widths: [2, 4, 4, 4],
            patch_size: (2, 2),
            vit_dim: 8,
            vit_depth: 1,
            vit_heads: 2,
            vit_mlp_ratio: 2,
            output_dim: 8,
            ..FeatureNetConfig::default()
        },
        denoiser: DenoiserConfig {
            layers: 1,
            heads: 2,
            latent_dim: 8,
            sequence_len: 3,
            step_embed_dim: 4,
            feature_dim: 8,
            mlp_ratio: 2,
        },
        diffusion_steps: 20,
        schedule: ScheduleKind::Cosine,
    }
}

/// Relative error of analytic against central-difference gradients of the
/// full tuple loss, over a few coordinates of every parameter tensor.
fn gradient_error(seed_value: u64) -> Result<(f64, usize)> {
    let cfg = tiny_model_config();
    let poses = random_poses(3, 10.0, seed::derive(seed_value, &[1]));
    let norm = PoseNormalizer::fit(&poses)?;
    let mut model = LocModel::new(&cfg, norm, seed_value)?;
    let mut init = Init::new(seed::derive(seed_value, &[2]));
    let side = cfg.bev.output_side;
    let images: Vec<BevImage> = (0..3)
        .map(|_| {
            BevImage::from_pixels(
                side,
                init.uniform(&[side * side], 1.0)
                    .into_data()
                    .iter()
                    .map(|v| v.abs())
                    .collect(),
            )
        })
        .collect::<Result<_>>()?;
    let refs: Vec<&BevImage> = images.iter().collect();
    let mut rng = seed::rng(seed_value, &[3]);
    let k = rng.random_range(1..=cfg.diffusion_steps);
    let eps: Vec<DiffPose> = (0..3)
        .map(|_| DiffPose(std::array::from_fn(|_| StandardNormal.sample(&mut rng))))
        .collect();
    let loss_of = |m: &LocModel| -> Result<f64> {
        let mut g = Graph::inference(m.store());
        let l = m.tuple_loss(&mut g, &refs, &poses, k, &eps)?;
        Ok(g.value(l).data()[0])
    };
    let grads = {
        let mut g = Graph::new(model.store());
        let l = model.tuple_loss(&mut g, &refs, &poses, k, &eps)?;
        g.backward(l)?.into_params()
    };
    let h = 1e-5;
    let (mut diff2, mut a2, mut n2, mut probes) = (0.0, 0.0, 0.0, 0);
    let ids: Vec<_> = model
        .store()
        .entries()
        .iter()
        .filter_map(|e| model.store().id(&e.name))
        .collect();
    for id in ids {
        let len = model.store().get(id).len();
        let analytic = grads.get(id).cloned().unwrap_or_else(|| Tensor::zeros(&[len]));
        for _ in 0..2 {
            let j = rng.random_range(0..len);
            let orig = model.store().get(id).data()[j];
            model.store_mut().get_mut(id).data_mut()[j] = orig + h;
            let lp = loss_of(&model)?;
            model.store_mut().get_mut(id).data_mut()[j] = orig - h;
            let lm = loss_of(&model)?;
            model.store_mut().get_mut(id).data_mut()[j] = orig;
            let num = (lp - lm) / (2.0 * h);
            let ana = analytic.data()[j];
            diff2 += (num - ana).powi(2);
            a2 += ana * ana;
            n2 += num * num;
            probes += 1;
        }
    }
    Ok((diff2.sqrt() / a2.sqrt().max(n2.sqrt()).max(1e-300), probes))
}

/// Full feature net + denoiser + loss gradients against finite differences.
pub fn gradient_checks(seeds: usize, base_seed: u64) -> Check {
    const NAME: &str = "gradient check";
    let start = Instant::now();
    let mut errs = Vec::new();
    for s in 0..seeds as u64 {
        match gradient_error(seed::derive(base_seed, &[9, s])) {
            Ok(e) => errs.push(e),
            Err(e) => return Check::failed(NAME, start, e),
        }
    }
    let worst = errs.iter().map(|e| e.0).fold(0.0, f64::max);
    let probes: usize = errs.iter().map(|e| e.1).sum();
    Check::timed(
        NAME,
        start,
        worst <= 1e-4,
        format!("{seeds} seeds, {probes} probes: worst relative error {worst:.2e} (tol 1e-4)"),
    )
}

/// Identity and half-turn views, and the virtual pose offset statistics.
pub fn augmentation_geometry(samples: usize, base_seed: u64) -> Check {
    const NAME: &str = "augmentation geometry";
    let start = Instant::now();
    let cfg = BevConfig::default();
    let run = || -> Result<(bool, bool, f64, f64)> {
        let (mut ident_ok, mut half_ok) = (true, true);
        let n = cfg.raster_side();
        let off = cfg.pad_before();
        for i in 0..5u64 {
            let map = random_cloud(seed::derive(base_seed, &[10, i]), 4000, 30.0);
            let anchor = random_poses(1, 40.0, seed::derive(base_seed, &[11, i]))[0];
            let view = render_virtual_bev(&map, &anchor, &anchor, &cfg, 1)?;
            ident_ok &= view.pixels() == rasterize(&map, &cfg)?.pixels();
            let turned = Pose2::new(anchor.x(), anchor.y(), anchor.yaw() + PI);
            let half = render_virtual_bev(&map, &turned, &anchor, &cfg, 1)?;
            for r in 0..n {
                for c in 0..n {
                    half_ok &= half.get(r + off, c + off) == view.get(n - 1 - r + off, n - 1 - c + off);
                }
            }
        }
        let aug = AugmentConfig::default();
        let anchor = Pose2::new(3.0, -7.0, 0.4);
        let (mut sx, mut sy, mut sxx, mut syy) = (0.0, 0.0, 0.0, 0.0);
        for i in 0..samples as u64 {
            let v = sample_virtual_pose(&anchor, &aug, seed::derive(base_seed, &[12, i]));
            let (dx, dy) = (v.x() - anchor.x(), v.y() - anchor.y());
            sx += dx;
            sy += dy;
            sxx += dx * dx;
            syy += dy * dy;
        }
        let m = samples as f64;
        let tau = aug.offset_std;
        let std_x = (sxx / m - (sx / m).powi(2)).sqrt();
        let std_y = (syy / m - (sy / m).powi(2)).sqrt();
        let std_err = ((std_x / tau - 1.0).abs()).max((std_y / tau - 1.0).abs());
        let mean_err = (sx / m).abs().max((sy / m).abs()) / tau;
        Ok((ident_ok, half_ok, std_err, mean_err))
    };
    match run() {
        Ok((ident, half, std_err, mean_err)) => Check::timed(
            NAME,
            start,
            ident && half && std_err <= 0.02 && mean_err <= 0.02,
            format!(
                "identity view exact: {ident}, half-turn reversal exact: {half}, offset std off by {:.2}%, mean off by {:.2}% of tau (tol 2%)",
                100.0 * std_err,
                100.0 * mean_err
            ),
        ),
        Err(e) => Check::failed(NAME, start, e),
    }
}

/// Metric edge cases.
pub fn metric_cases() -> Check {
    const NAME: &str = "metrics";
    let start = Instant::now();
    let thr = SuccessThresholds::default();
    let mut failures = Vec::new();
    let origin = Pose2::new(0.0, 0.0, 0.0);
    let f = FrameResult::new(0, origin, Pose2::new(3.0, 4.0, 0.0), &thr);
    if f.e_t != 5.0 || f.e_y != 0.0 {
        failures.push(format!("3-4-5 case gave e_t {} e_y {}", f.e_t, f.e_y));
    }
    let wrap = yaw_error_deg(179f64.to_radians(), (-179f64).to_radians());
    if (wrap - 2.0).abs() > 1e-9 {
        failures.push(format!("+-179 deg wrap gave {wrap}"));
    }
    let cases = [
        (2.0, 0.0, false),
        (1.999, 4.999, true),
        (0.0, 5.0, false),
        (1.0, 1.0, true),
        (3.0, 1.0, false),
    ];
    for (e_t, e_y, want) in cases {
        if thr.success(e_t, e_y) != want {
            failures.push(format!("success({e_t}, {e_y}) != {want}"));
        }
    }
    let at_two = FrameResult::new(1, origin, Pose2::new(2.0, 0.0, 0.0), &thr);
    if at_two.success {
        failures.push("e_t = 2.0 m counted as a success".into());
    }
    Check::timed(
        NAME,
        start,
        failures.is_empty(),
        if failures.is_empty() {
            "3-4-5, +-179 deg wrap and strict threshold boundaries hold".into()
        } else {
            failures.join("; ")
        },
    )
}

/// Wall time of one `steps`-step localization of a single tuple.
pub fn inference_latency(model: &LocModel, images: &[&BevImage], steps: usize, reps: usize) -> Check {
    const NAME: &str = "inference latency";
    let start = Instant::now();
    let mut worst = 0.0f64;
    for r in 0..reps.max(1) {
        let t = Instant::now();
        if let Err(e) = model.localize(images, steps, r as u64) {
            return Check::failed(NAME, start, e);
        }
        worst = worst.max(t.elapsed().as_secs_f64());
    }
    Check::timed(
        NAME,
        start,
        worst < 1.0,
        format!(
            "{steps}-step tuple inference: worst {:.1} ms over {reps} runs (limit 1000 ms)",
            1e3 * worst
        ),
    )
}

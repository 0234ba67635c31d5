use crate::bev::BevImage;
use crate::diffusion::{
    add_noise, ddim_sample, poses_tensor, Conditioned, Denoiser, DiffPose, NoiseSchedule, PoseNormalizer,
};
use crate::error::{Error, Result};
use crate::feature_net::{image_tensor, FeatureNet};
use crate::geometry::Pose2;
use crate::nn::{Graph, Init, ParamStore, Tensor, Var};

use super::ModelConfig;

/// Feature network, denoiser and the bookkeeping needed to decode poses.
#[derive(Debug, Clone)]
pub struct LocModel {
    cfg: ModelConfig,
    store: ParamStore,
    feature: FeatureNet,
    denoiser: Denoiser,
    schedule: NoiseSchedule,
    normalizer: PoseNormalizer,
}

impl LocModel {
    pub fn new(cfg: &ModelConfig, normalizer: PoseNormalizer, seed: u64) -> Result<Self> {
        cfg.validate()?;
        normalizer.validate()?;
        let mut store = ParamStore::new();
        let mut init = Init::new(seed);
        let feature = FeatureNet::new(&cfg.feature, &mut store, &mut init, "feature")?;
        let denoiser = Denoiser::new(&cfg.denoiser, &mut store, &mut init, "denoiser")?;
        let schedule = NoiseSchedule::build(cfg.diffusion_steps, cfg.schedule)?;
        Ok(LocModel {
            cfg: cfg.clone(),
            store,
            feature,
            denoiser,
            schedule,
            normalizer,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn feature_net(&self) -> &FeatureNet {
        &self.feature
    }

    pub fn denoiser(&self) -> &Denoiser {
        &self.denoiser
    }

    pub fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    pub(crate) fn set_schedule(&mut self, s: NoiseSchedule) {
        self.schedule = s;
    }

    pub fn normalizer(&self) -> &PoseNormalizer {
        &self.normalizer
    }

    fn check_images(&self, images: &[&BevImage]) -> Result<()> {
        let n = self.cfg.denoiser.sequence_len;
        if images.len() != n {
            return Err(Error::InvalidArgument(format!(
                "model expects tuples of {n} images, got {}",
                images.len()
            )));
        }
        Ok(())
    }

    /// Stacked descriptors `[N, output_dim]` for a tuple of images.
    pub fn features(&self, g: &mut Graph, images: &[&BevImage]) -> Result<Var> {
        let rows = images
            .iter()
            .map(|img| self.feature.forward_image(g, img))
            .collect::<Result<Vec<_>>>()?;
        g.concat_rows(&rows)
    }

    /// Descriptor `[1, output_dim]` of one image, without gradients.
    pub fn descriptor(&self, img: &BevImage) -> Result<Tensor> {
        let mut g = Graph::inference(&self.store);
        let v = g.input(image_tensor(img));
        let out = self.feature.forward(&mut g, v)?;
        Ok(g.value(out).clone())
    }

    /// L1 ε-prediction loss for one tuple at step `k` with noise `eps`.
    pub fn tuple_loss(
        &self,
        g: &mut Graph,
        images: &[&BevImage],
        poses: &[Pose2],
        k: usize,
        eps: &[DiffPose],
    ) -> Result<Var> {
        self.check_images(images)?;
        let t0: Vec<DiffPose> = poses.iter().map(|p| self.normalizer.encode(p)).collect();
        let tk = add_noise(&t0, k, eps, &self.schedule)?;
        let feats = self.features(g, images)?;
        let noisy = g.input(poses_tensor(&tk));
        let eps_hat = self.denoiser.forward(g, noisy, k, feats)?;
        g.l1_mean(eps_hat, poses_tensor(eps))
    }

    /// DDIM sampling from stacked descriptors, decoded to world poses.
    pub fn sample(&self, feats: &Tensor, steps: usize, seed: u64) -> Result<Vec<Pose2>> {
        let model = Conditioned {
            denoiser: &self.denoiser,
            store: &self.store,
            feats,
        };
        let n = self.cfg.denoiser.sequence_len;
        ddim_sample(&model, n, steps, &self.schedule, seed, Some(1.0))?
            .iter()
            .map(|d| self.normalizer.decode(d))
            .collect()
    }

    /// Poses of every frame in a tuple.
    pub fn localize(&self, images: &[&BevImage], steps: usize, seed: u64) -> Result<Vec<Pose2>> {
        self.check_images(images)?;
        let rows = images
            .iter()
            .map(|img| self.descriptor(img))
            .collect::<Result<Vec<_>>>()?;
        self.sample(&stack_rows(&rows), steps, seed)
    }
}

pub(crate) fn stack_rows(rows: &[Tensor]) -> Tensor {
    let width = rows.first().map_or(0, |r| r.len());
    let data = rows.iter().flat_map(|r| r.data().iter().copied()).collect();
    Tensor::from_parts(vec![rows.len(), width], data)
}

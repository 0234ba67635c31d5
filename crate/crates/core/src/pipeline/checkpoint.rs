//! `.bvdl` checkpoint container.
//!
//! ```text
//! "BVDL" | u32 version | u64 header length | JSON header | f64 data | u32 crc32
//! ```
//!
//! All integers and floats are little-endian. The header holds every
//! config, the pose normalizer, the noise schedule, the RNG state, the loss
//! history and an index of the tensors stored back to back in the data
//! section. The trailing CRC covers everything before it.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::model::LocModel;
use super::{ModelConfig, TrainConfig};
use crate::diffusion::{NoiseSchedule, PoseNormalizer};
use crate::error::{Error, Result};
use crate::nn::Tensor;

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"BVDL";
pub const CHECKPOINT_VERSION: u32 = 1;
const PREFIX: usize = 4 + 4 + 8;
const MAX_HEADER: u64 = 64 << 20;

/// Counter-based RNG position: the stream is fully determined by the base
/// seed and the number of optimizer steps taken.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RngState {
    pub seed: u64,
    pub step: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorIndex {
    pub name: String,
    pub shape: Vec<usize>,
    /// Offset into the data section, in f64 elements.
    pub offset: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointHeader {
    pub model: ModelConfig,
    pub train: Option<TrainConfig>,
    pub normalizer: PoseNormalizer,
    pub schedule: NoiseSchedule,
    pub rng: RngState,
    pub epoch: usize,
    pub loss_history: Vec<f64>,
    pub tensors: Vec<TensorIndex>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub tensors: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn from_model(
        model: &LocModel,
        train: Option<&TrainConfig>,
        rng: RngState,
        epoch: usize,
        loss_history: &[f64],
    ) -> Self {
        let mut offset = 0u64;
        let mut index = Vec::new();
        let mut tensors = Vec::new();
        for e in model.store().entries() {
            index.push(TensorIndex {
                name: e.name.clone(),
                shape: e.value.shape().to_vec(),
                offset,
            });
            offset += e.value.len() as u64;
            tensors.push((e.name.clone(), e.value.clone()));
        }
        Checkpoint {
            header: CheckpointHeader {
                model: model.config().clone(),
                train: train.cloned(),
                normalizer: *model.normalizer(),
                schedule: model.schedule().clone(),
                rng,
                epoch,
                loss_history: loss_history.iter().copied().filter(|v| v.is_finite()).collect(),
                tensors: index,
            },
            tensors,
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = serde_json::to_vec(&self.header).expect("checkpoint header serializes");
        let elems: usize = self.tensors.iter().map(|(_, t)| t.len()).sum();
        let mut out = Vec::with_capacity(PREFIX + header.len() + 8 * elems + 4);
        out.extend_from_slice(&CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for (_, t) in &self.tensors {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < PREFIX + 4 {
            return Err(Error::checkpoint(
                "file",
                format!("truncated: {} bytes is shorter than the fixed prefix", bytes.len()),
            ));
        }
        if bytes[..4] != CHECKPOINT_MAGIC {
            return Err(Error::checkpoint(
                "magic",
                format!("expected BVDL, got {:?}", &bytes[..4]),
            ));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != CHECKPOINT_VERSION {
            return Err(Error::checkpoint(
                "format_version",
                format!("unsupported version {version}, this build reads {CHECKPOINT_VERSION}"),
            ));
        }
        let header_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap());
        if header_len > MAX_HEADER || header_len as usize > bytes.len() - PREFIX - 4 {
            return Err(Error::checkpoint(
                "header_len",
                format!("header length {header_len} exceeds the file size {}", bytes.len()),
            ));
        }
        let body_end = bytes.len() - 4;
        let stored_crc = u32::from_le_bytes(bytes[body_end..].try_into().unwrap());
        let crc = crc32fast::hash(&bytes[..body_end]);
        if crc != stored_crc {
            return Err(Error::checkpoint(
                "crc32",
                format!("checksum {crc:08x} does not match stored {stored_crc:08x}; file is truncated or corrupt"),
            ));
        }
        let header_end = PREFIX + header_len as usize;
        let header: CheckpointHeader = serde_json::from_slice(&bytes[PREFIX..header_end])
            .map_err(|e| Error::checkpoint("header", e.to_string()))?;
        header
            .model
            .validate()
            .map_err(|e| Error::checkpoint("header.model", e.to_string()))?;
        header
            .normalizer
            .validate()
            .map_err(|e| Error::checkpoint("header.normalizer", e.to_string()))?;
        header
            .schedule
            .validate()
            .map_err(|e| Error::checkpoint("header.schedule", e.to_string()))?;
        if header.schedule.steps() != header.model.diffusion_steps || header.schedule.kind() != header.model.schedule {
            return Err(Error::checkpoint(
                "header.schedule",
                "schedule does not match model.diffusion_steps / model.schedule",
            ));
        }

        let data = &bytes[header_end..body_end];
        if !data.len().is_multiple_of(8) {
            return Err(Error::checkpoint(
                "data",
                format!("{} bytes is not a whole number of f64", data.len()),
            ));
        }
        let available = (data.len() / 8) as u64;
        let mut expected_offset = 0u64;
        let mut tensors = Vec::with_capacity(header.tensors.len());
        for (i, t) in header.tensors.iter().enumerate() {
            let field = format!("tensors[{i}] ({})", t.name);
            let n = t
                .shape
                .iter()
                .try_fold(1u64, |acc, &d| acc.checked_mul(d as u64))
                .ok_or_else(|| Error::checkpoint(&field, "shape overflows"))?;
            if t.offset != expected_offset {
                return Err(Error::checkpoint(
                    &field,
                    format!("offset {} but previous tensors end at {expected_offset}", t.offset),
                ));
            }
            let end = expected_offset
                .checked_add(n)
                .filter(|&e| e <= available)
                .ok_or_else(|| {
                    Error::checkpoint(
                        &field,
                        format!("needs {n} values past offset {}, data holds {available}", t.offset),
                    )
                })?;
            let vals: Vec<f64> = data[8 * expected_offset as usize..8 * end as usize]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            if let Some(bad) = vals.iter().position(|v| !v.is_finite()) {
                return Err(Error::checkpoint(&field, format!("non-finite value at element {bad}")));
            }
            tensors.push((t.name.clone(), Tensor::new(t.shape.clone(), vals)?));
            expected_offset = end;
        }
        if expected_offset != available {
            return Err(Error::checkpoint(
                "data",
                format!(
                    "{} trailing values not described by the tensor index",
                    available - expected_offset
                ),
            ));
        }
        Ok(Checkpoint { header, tensors })
    }

    /// Writes through a temporary file so a crash never leaves a partial
    /// checkpoint under `path`.
    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let tmp = path.with_extension("bvdl.tmp");
        fs::write(&tmp, self.to_bytes()).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// Copies the stored tensors into `model`, naming the first tensor whose
    /// name or shape disagrees.
    pub fn load_into(&self, model: &mut LocModel) -> Result<()> {
        model.store_mut().load_from(&self.tensors)
    }

    /// Rebuilds the model described by the header and loads its weights.
    pub fn to_model(&self) -> Result<LocModel> {
        let mut model = LocModel::new(&self.header.model, self.header.normalizer, 0)?;
        model.set_schedule(self.header.schedule.clone());
        self.load_into(&mut model)?;
        Ok(model)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bev::BevConfig;
    use crate::diffusion::DenoiserConfig;
    use crate::feature_net::FeatureNetConfig;

    pub(crate) fn tiny_model_config() -> ModelConfig {
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
            schedule: crate::diffusion::ScheduleKind::Cosine,
        }
    }

    fn sample() -> (LocModel, Checkpoint) {
        let norm = PoseNormalizer {
            min_x: -10.0,
            max_x: 10.0,
            min_y: -5.0,
            max_y: 5.0,
        };
        let model = LocModel::new(&tiny_model_config(), norm, 3).unwrap();
        let ck = Checkpoint::from_model(
            &model,
            Some(&TrainConfig::default()),
            RngState { seed: 3, step: 17 },
            2,
            &[0.9, 0.5],
        );
        (model, ck)
    }

    #[test]
    fn round_trip_is_bit_identical() {
        let (model, ck) = sample();
        let back = Checkpoint::from_bytes(&ck.to_bytes()).unwrap();
        assert_eq!(back, ck);
        let rebuilt = back.to_model().unwrap();
        for (a, b) in rebuilt.store().entries().iter().zip(model.store().entries()) {
            assert_eq!(a.name, b.name);
            assert!(a
                .value
                .data()
                .iter()
                .zip(b.value.data())
                .all(|(x, y)| x.to_bits() == y.to_bits()));
        }
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.bvdl");
        ck.save(&p).unwrap();
        assert_eq!(Checkpoint::load(&p).unwrap(), ck);
    }

    #[test]
    fn truncation_and_corruption_are_rejected() {
        let (_, ck) = sample();
        let bytes = ck.to_bytes();
        for cut in [0, 3, 15, 20, bytes.len() / 2, bytes.len() - 1] {
            assert!(Checkpoint::from_bytes(&bytes[..cut]).is_err(), "cut {cut}");
        }
        let mut flipped = bytes.clone();
        let mid = flipped.len() - 100;
        flipped[mid] ^= 1;
        assert!(matches!(Checkpoint::from_bytes(&flipped), Err(Error::Checkpoint { field, .. }) if field == "crc32"));
        let mut version = bytes.clone();
        version[4] = 9;
        assert!(
            matches!(Checkpoint::from_bytes(&version), Err(Error::Checkpoint { field, .. }) if field == "format_version")
        );
        let mut magic = bytes;
        magic[0] = b'X';
        assert!(matches!(Checkpoint::from_bytes(&magic), Err(Error::Checkpoint { field, .. }) if field == "magic"));
    }

    #[test]
    fn mismatched_width_names_tensor() {
        let (_, ck) = sample();
        let mut cfg = tiny_model_config();
        cfg.feature.vit_dim = 4;
        let mut other = LocModel::new(&cfg, ck.header.normalizer, 0).unwrap();
        match ck.load_into(&mut other) {
            Err(Error::Checkpoint { field, detail }) => {
                assert!(field.starts_with("feature."), "{field}");
                assert!(detail.contains("shape mismatch"), "{detail}");
            }
            other => panic!("expected a shape error, got {other:?}"),
        }
    }

    #[test]
    fn bad_header_reports_field() {
        let (_, ck) = sample();
        let mut h = ck.header.clone();
        h.normalizer.max_x = h.normalizer.min_x;
        let bad = Checkpoint {
            header: h,
            tensors: ck.tensors.clone(),
        };
        assert!(
            matches!(Checkpoint::from_bytes(&bad.to_bytes()), Err(Error::Checkpoint { field, .. }) if field == "header.normalizer")
        );
        let mut h = ck.header.clone();
        h.tensors[1].offset += 1;
        let bad = Checkpoint {
            header: h,
            tensors: ck.tensors,
        };
        assert!(
            matches!(Checkpoint::from_bytes(&bad.to_bytes()), Err(Error::Checkpoint { field, .. }) if field.starts_with("tensors[1]"))
        );
    }
}

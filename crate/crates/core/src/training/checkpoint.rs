//! Binary checkpoint: magic, format version (u32 LE), JSON header length
//! (u64 LE) and header, parameter count (u64 LE) and f64 LE parameters, then a
//! SHA-256 digest of everything before it.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::TrainConfig;
use crate::backbone::Backbone;
use crate::conditioning::Conditioner;
use crate::dataio::{FeatureConfig, FeatureNormalizer};
use crate::error::{Error, Result};
use crate::model::{ModelConfig, TriageModel};
use crate::nn::ParamStore;

const MAGIC: &[u8; 8] = b"SNDTRIAG";
pub const CHECKPOINT_VERSION: u32 = 1;
const DIGEST_LEN: usize = 32;

/// A trained model with everything needed to run it on new audio.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model: TriageModel,
    pub train_config: TrainConfig,
    pub feature_config: FeatureConfig,
    pub class_names: Vec<String>,
    pub epoch: usize,
    pub validation_score: f64,
}

#[derive(Serialize, Deserialize)]
struct Header {
    model: ModelConfig,
    train_config: TrainConfig,
    feature_config: FeatureConfig,
    class_names: Vec<String>,
    epoch: usize,
    validation_score: f64,
    backbone_params: usize,
    conditioner_params: usize,
    mel_bands: usize,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let model = &self.model;
        let header = Header {
            model: model.config.clone(),
            train_config: self.train_config.clone(),
            feature_config: self.feature_config.clone(),
            class_names: self.class_names.clone(),
            epoch: self.epoch,
            validation_score: self.validation_score,
            backbone_params: model.backbone.params().len(),
            conditioner_params: model.conditioner.params().len(),
            mel_bands: model.normalizer.mean.len(),
        };
        let header = serde_json::to_vec(&header).map_err(|e| Error::CheckpointCorrupt(e.to_string()))?;
        let payload = [
            model.backbone.params().data(),
            model.conditioner.params().data(),
            &model.normalizer.mean,
            &model.normalizer.std,
        ];
        let count: usize = payload.iter().map(|p| p.len()).sum();

        let mut out = Vec::with_capacity(MAGIC.len() + 20 + header.len() + 8 * count + DIGEST_LEN);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&(count as u64).to_le_bytes());
        for v in payload.iter().flat_map(|p| p.iter()) {
            out.extend_from_slice(&v.to_le_bytes());
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let corrupt = |m: &str| Error::CheckpointCorrupt(m.to_string());
        let mut r = Reader { bytes, pos: 0 };
        if r.take(MAGIC.len()).map_err(|_| corrupt("file too short"))? != MAGIC {
            return Err(corrupt("not a checkpoint file"));
        }
        let version = u32::from_le_bytes(r.array().map_err(|_| corrupt("file too short"))?);
        if version != CHECKPOINT_VERSION {
            return Err(Error::CheckpointVersion {
                found: version,
                expected: CHECKPOINT_VERSION,
            });
        }
        if bytes.len() < r.pos + DIGEST_LEN {
            return Err(corrupt("truncated file"));
        }
        let (body, digest) = bytes.split_at(bytes.len() - DIGEST_LEN);
        if Sha256::digest(body).as_slice() != digest {
            return Err(corrupt("checksum mismatch (truncated or modified file)"));
        }
        let mut r = Reader { bytes: body, pos: r.pos };
        let header_len = u64::from_le_bytes(r.array()?) as usize;
        let header: Header =
            serde_json::from_slice(r.take(header_len)?).map_err(|e| Error::CheckpointCorrupt(format!("header: {e}")))?;
        let count = u64::from_le_bytes(r.array()?) as usize;
        let expected = header.backbone_params + header.conditioner_params + 2 * header.mel_bands;
        if count != expected || r.remaining() != 8 * count {
            return Err(corrupt("parameter count does not match the header"));
        }
        let mut values = Vec::with_capacity(count);
        for _ in 0..count {
            values.push(f64::from_le_bytes(r.array()?));
        }

        header.model.validate()?;
        let mut rest = values.as_slice();
        let mut split = |n: usize| {
            let (a, b) = rest.split_at(n);
            rest = b;
            a.to_vec()
        };
        let backbone_data = split(header.backbone_params);
        let conditioner_data = split(header.conditioner_params);
        let normalizer = FeatureNormalizer {
            mean: split(header.mel_bands),
            std: split(header.mel_bands),
        };
        let backbone = rebuild_backbone(&header.model, backbone_data)?;
        let conditioner = rebuild_conditioner(&header.model, conditioner_data)?;
        if normalizer.mean.len() != header.model.backbone.n_mels {
            return Err(corrupt("normalizer size does not match the model"));
        }
        if header.class_names.len() != header.model.n_classes() {
            return Err(corrupt("class map size does not match the model"));
        }
        Ok(Self {
            model: TriageModel {
                config: header.model,
                normalizer,
                backbone,
                conditioner,
            },
            train_config: header.train_config,
            feature_config: header.feature_config,
            class_names: header.class_names,
            epoch: header.epoch,
            validation_score: header.validation_score,
        })
    }

    /// Writes to a sibling temporary file and renames it into place.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        let tmp = path.with_file_name(format!(".{name}.tmp"));
        let write = || -> std::io::Result<()> {
            let mut f = fs::File::create(&tmp)?;
            f.write_all(&bytes)?;
            f.sync_all()?;
            fs::rename(&tmp, path)
        };
        write().map_err(|e| {
            let _ = fs::remove_file(&tmp);
            Error::io(path, e)
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

fn rebuild_backbone(config: &ModelConfig, data: Vec<f64>) -> Result<Backbone> {
    let layout = Backbone::new(config.backbone.clone(), &mut layout_rng())?;
    let params = ParamStore::from_parts(layout.params().specs().to_vec(), data)
        .ok_or_else(|| Error::CheckpointCorrupt("backbone parameter count mismatch".into()))?;
    Backbone::from_params(config.backbone.clone(), params)
}

fn rebuild_conditioner(config: &ModelConfig, data: Vec<f64>) -> Result<Conditioner> {
    let layout = Conditioner::new(config.conditioner.clone(), &mut layout_rng())?;
    let params = ParamStore::from_parts(layout.params().specs().to_vec(), data)
        .ok_or_else(|| Error::CheckpointCorrupt("conditioner parameter count mismatch".into()))?;
    Conditioner::from_params(config.conditioner.clone(), params)
}

fn layout_rng() -> rand_chacha::ChaCha8Rng {
    <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::CheckpointCorrupt("truncated file".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().expect("length checked"))
    }

    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }
}

//! Model checkpoint files.
//!
//! A checkpoint uses the shared container layout (see `container`) with
//! magic `CAWMODEL` and version 1. The payload is a sequence of
//! little-endian `f64` values:
//!
//! 1. tuned encoder parameters, layer by layer (`weight` row-major, then `bias`)
//! 2. frozen encoder parameters, same order
//! 3. class prototypes, `[classes × embed_dim]` row-major
//! 4. optimizer velocity, same order as (1), present iff `optimizer_step` is set

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ClassPrototypeSet, DualEncoderModel, EncoderArch, ImageEncoder, SnapshotState};
use crate::container::{self, PayloadReader};
use crate::error::{FormatError, Result};
use crate::tensor::Tensor;
use crate::training::OptimizerState;

const MAGIC: &[u8; 8] = b"CAWMODEL";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: DualEncoderModel,
    pub optimizer: Option<OptimizerState>,
    pub seed: u64,
    pub epoch: u64,
    pub config_digest: String,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    format_version: u32,
    arch: EncoderArch,
    temperature: f64,
    seed: u64,
    epoch: u64,
    config_digest: String,
    class_names: Vec<String>,
    embed_dim: usize,
    snapshot: SnapshotState,
    optimizer_step: Option<u64>,
}

pub fn write_checkpoint(ckpt: &Checkpoint) -> Result<Vec<u8>> {
    let model = &ckpt.model;
    let mut payload = Vec::new();
    container::push_f64s(&mut payload, &model.tuned().flat_params());
    container::push_f64s(&mut payload, &model.frozen().flat_params());
    container::push_f64s(&mut payload, model.prototypes().embeddings().data());
    if let Some(opt) = &ckpt.optimizer {
        container::push_f64s(&mut payload, &opt.flat_velocity());
    }
    let header = Header {
        format_version: CHECKPOINT_VERSION,
        arch: model.tuned().arch(),
        temperature: model.temperature(),
        seed: ckpt.seed,
        epoch: ckpt.epoch,
        config_digest: ckpt.config_digest.clone(),
        class_names: model.prototypes().names().to_vec(),
        embed_dim: model.prototypes().embed_dim(),
        snapshot: model.snapshot_state(),
        optimizer_step: ckpt.optimizer.as_ref().map(OptimizerState::step),
    };
    container::encode(MAGIC, CHECKPOINT_VERSION, &header, &payload)
}

pub fn read_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let (header, payload): (Header, _) = container::decode(bytes, MAGIC, CHECKPOINT_VERSION)?;
    if header.format_version != CHECKPOINT_VERSION {
        return Err(FormatError::VersionMismatch { found: header.format_version, expected: CHECKPOINT_VERSION }.into());
    }
    let n = header.arch.num_params();
    let classes = header.class_names.len();
    let mut r = PayloadReader::new(payload);
    let tuned = encoder_from_flat(header.arch, &r.f64s(n)?)?;
    let frozen = encoder_from_flat(header.arch, &r.f64s(n)?)?;
    let protos = Tensor::matrix(classes, header.embed_dim, r.f64s(classes * header.embed_dim)?)?;
    let optimizer = match header.optimizer_step {
        Some(step) => {
            let shapes: Vec<Vec<usize>> = tuned.params().map(|t| t.shape().to_vec()).collect();
            Some(OptimizerState::from_flat(&shapes, &r.f64s(n)?, step)?)
        }
        None => None,
    };
    r.finish()?;
    let prototypes = ClassPrototypeSet::new(header.class_names, protos)?;
    let model = DualEncoderModel::from_parts(tuned, frozen, prototypes, header.temperature, header.snapshot)?;
    Ok(Checkpoint {
        model,
        optimizer,
        seed: header.seed,
        epoch: header.epoch,
        config_digest: header.config_digest,
    })
}

fn encoder_from_flat(arch: EncoderArch, values: &[f64]) -> Result<ImageEncoder> {
    let mut enc = ImageEncoder::zeros(arch).map_err(|e| FormatError::Header(e.to_string()))?;
    enc.set_flat_params(values)?;
    Ok(enc)
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    std::fs::write(path, write_checkpoint(ckpt)?)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    read_checkpoint(&std::fs::read(path)?)
}

//! Synthetic zero-shot classification data and the dataset file format.
//!
//! A hidden "world" map `M` (orthonormal rows, `embed_dim × input_dim`) and
//! a pool of unit prototype vectors are drawn from `world_seed`. The cluster
//! of a class whose prototype is `q` is centred at `mid + center_scale · Mᵀq`,
//! so an affine map sending every centre to its prototype always exists.
//! Classes drawn from a disjoint slice of the pool give transfer sets whose
//! prototypes were never seen in training.
//!
//! Dataset files use the shared container layout with magic `CAWDATA\0`,
//! version 1, and payload: `x` as `[n × input_dim]` little-endian `f64`,
//! labels as `n` little-endian `u32`, prototypes as `[classes × embed_dim]`
//! little-endian `f64`.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::container::{self, PayloadReader};
use crate::error::{Error, FormatError, Result};
use crate::model::{random_unit_vectors, ClassPrototypeSet};
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"CAWDATA\0";
pub const DATASET_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticDatasetSpec {
    pub classes: usize,
    pub input_dim: usize,
    pub embed_dim: usize,
    pub samples_per_class: usize,
    /// Distance of cluster centres from the middle of the value range.
    pub center_scale: f64,
    pub noise_sigma: f64,
    pub value_min: f64,
    pub value_max: f64,
    /// Seeds the per-sample noise.
    pub seed: u64,
    /// Seeds the hidden map and the prototype pool.
    pub world_seed: u64,
    /// First pool prototype used when `linkage` is absent.
    pub class_offset: usize,
    /// Pool prototype index for each class (cluster `c` → prototype `linkage[c]`).
    pub linkage: Option<Vec<usize>>,
}

impl Default for SyntheticDatasetSpec {
    fn default() -> Self {
        Self {
            classes: 8,
            input_dim: 64,
            embed_dim: 32,
            samples_per_class: 200,
            center_scale: 0.6,
            noise_sigma: 0.05,
            value_min: 0.0,
            value_max: 1.0,
            seed: 0,
            world_seed: 0,
            class_offset: 0,
            linkage: None,
        }
    }
}

impl SyntheticDatasetSpec {
    /// Same world, fresh noise.
    pub fn with_seed(&self, seed: u64) -> Self {
        Self { seed, ..self.clone() }
    }

    /// Held-out classes from the same world: disjoint prototypes and a
    /// rescaled cluster geometry.
    pub fn transfer(&self, seed: u64, center_shift: f64) -> Self {
        Self {
            seed,
            class_offset: self.pool_indices().iter().max().map_or(0, |m| m + 1),
            linkage: None,
            center_scale: self.center_scale * center_shift,
            ..self.clone()
        }
    }

    pub fn pool_indices(&self) -> Vec<usize> {
        match &self.linkage {
            Some(l) => l.clone(),
            None => (self.class_offset..self.class_offset + self.classes).collect(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::Config(format!("noise_sigma must be finite and >= 0, got {}", self.noise_sigma)));
        }
        if self.classes == 0 || self.samples_per_class == 0 {
            return Err(Error::Config("every class needs at least one sample".into()));
        }
        if self.input_dim == 0 || self.embed_dim == 0 || self.embed_dim > self.input_dim {
            return Err(Error::Config(format!(
                "need 0 < embed_dim <= input_dim (got {} and {})",
                self.embed_dim, self.input_dim
            )));
        }
        if self.value_min.partial_cmp(&self.value_max) != Some(std::cmp::Ordering::Less) || !self.center_scale.is_finite() {
            return Err(Error::Config("invalid value range or center scale".into()));
        }
        if let Some(l) = &self.linkage {
            if l.len() != self.classes {
                return Err(Error::Config(format!("linkage has {} entries for {} classes", l.len(), self.classes)));
            }
            let mut sorted = l.clone();
            sorted.sort_unstable();
            sorted.dedup();
            if sorted.len() != l.len() {
                return Err(Error::Config("linkage maps two clusters to one prototype".into()));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub name: String,
    pub x: Tensor,
    pub labels: Vec<usize>,
    pub prototypes: ClassPrototypeSet,
    pub seed: u64,
    pub spec: Option<SyntheticDatasetSpec>,
}

impl Dataset {
    pub fn new(name: impl Into<String>, x: Tensor, labels: Vec<usize>, prototypes: ClassPrototypeSet) -> Result<Self> {
        let (n, _) = x.require_matrix("dataset inputs")?;
        crate::losses::validate_labels(&labels, n, prototypes.len())?;
        Ok(Self { name: name.into(), x, labels, prototypes, seed: 0, spec: None })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.x.cols()
    }

    pub fn classes(&self) -> usize {
        self.prototypes.len()
    }

    /// Inputs and labels for the given sample indices.
    pub fn batch(&self, indices: &[usize]) -> (Tensor, Vec<usize>) {
        (self.x.select_rows(indices), indices.iter().map(|&i| self.labels[i]).collect())
    }
}

/// Gaussian clusters around seeded centres, clipped to the value range.
pub fn generate_synthetic(spec: &SyntheticDatasetSpec) -> Result<Dataset> {
    spec.validate()?;
    let pool_ids = spec.pool_indices();
    let pool_len = pool_ids.iter().max().map_or(0, |m| m + 1);

    let mut world = ChaCha8Rng::seed_from_u64(spec.world_seed);
    let map_rows = random_unit_vectors(spec.embed_dim, spec.input_dim, &mut world);
    let pool = random_unit_vectors(pool_len, spec.embed_dim, &mut world);

    let mid = 0.5 * (spec.value_min + spec.value_max);
    let centers: Vec<Vec<f64>> = pool_ids
        .iter()
        .map(|&k| {
            let q = &pool[k];
            (0..spec.input_dim)
                .map(|d| {
                    let lifted: f64 = map_rows.iter().zip(q).map(|(row, qk)| row[d] * qk).sum();
                    (mid + spec.center_scale * lifted).clamp(spec.value_min, spec.value_max)
                })
                .collect()
        })
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let n = spec.classes * spec.samples_per_class;
    let mut data = Vec::with_capacity(n * spec.input_dim);
    let mut labels = Vec::with_capacity(n);
    let noise = if spec.noise_sigma > 0.0 {
        Some(Normal::new(0.0, spec.noise_sigma).map_err(|e| Error::Config(e.to_string()))?)
    } else {
        None
    };
    for (c, center) in centers.iter().enumerate() {
        for _ in 0..spec.samples_per_class {
            for &m in center {
                let v = match &noise {
                    Some(dist) => (m + dist.sample(&mut rng)).clamp(spec.value_min, spec.value_max),
                    None => m,
                };
                data.push(v);
            }
            labels.push(c);
        }
    }

    let names = pool_ids.iter().map(|k| format!("class_{k}")).collect();
    let protos = Tensor::matrix(spec.classes, spec.embed_dim, pool_ids.iter().flat_map(|&k| pool[k].clone()).collect())?;
    let prototypes = ClassPrototypeSet::new(names, protos)?;
    let name = if spec.class_offset == 0 && spec.linkage.is_none() { "synthetic" } else { "synthetic-transfer" };
    Ok(Dataset {
        name: name.into(),
        x: Tensor::matrix(n, spec.input_dim, data)?,
        labels,
        prototypes,
        seed: spec.seed,
        spec: Some(spec.clone()),
    })
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    format_version: u32,
    name: String,
    samples: usize,
    input_dim: usize,
    classes: usize,
    embed_dim: usize,
    seed: u64,
    class_names: Vec<String>,
    spec: Option<SyntheticDatasetSpec>,
}

pub fn write_dataset(d: &Dataset) -> Result<Vec<u8>> {
    let mut payload = Vec::with_capacity(d.x.numel() * 8 + d.len() * 4);
    container::push_f64s(&mut payload, d.x.data());
    for &l in &d.labels {
        let l = u32::try_from(l).map_err(|_| Error::Domain(format!("label {l} does not fit in u32")))?;
        payload.extend_from_slice(&l.to_le_bytes());
    }
    container::push_f64s(&mut payload, d.prototypes.embeddings().data());
    let header = Header {
        format_version: DATASET_VERSION,
        name: d.name.clone(),
        samples: d.len(),
        input_dim: d.input_dim(),
        classes: d.classes(),
        embed_dim: d.prototypes.embed_dim(),
        seed: d.seed,
        class_names: d.prototypes.names().to_vec(),
        spec: d.spec.clone(),
    };
    container::encode(MAGIC, DATASET_VERSION, &header, &payload)
}

pub fn read_dataset(bytes: &[u8]) -> Result<Dataset> {
    let (h, payload): (Header, _) = container::decode(bytes, MAGIC, DATASET_VERSION)?;
    if h.format_version != DATASET_VERSION {
        return Err(FormatError::VersionMismatch { found: h.format_version, expected: DATASET_VERSION }.into());
    }
    if h.class_names.len() != h.classes {
        return Err(FormatError::Header(format!("{} class names for {} classes", h.class_names.len(), h.classes)).into());
    }
    let overflow = || FormatError::Header("declared sizes overflow".into());
    let mut r = PayloadReader::new(payload);
    let x = r.f64s(h.samples.checked_mul(h.input_dim).ok_or_else(overflow)?)?;
    let labels: Vec<usize> = r.u32s(h.samples)?.into_iter().map(|l| l as usize).collect();
    let protos = r.f64s(h.classes.checked_mul(h.embed_dim).ok_or_else(overflow)?)?;
    r.finish()?;
    let prototypes = ClassPrototypeSet::new(h.class_names, Tensor::matrix(h.classes, h.embed_dim, protos)?)?;
    let mut d = Dataset::new(h.name, Tensor::matrix(h.samples, h.input_dim, x)?, labels, prototypes)?;
    d.seed = h.seed;
    d.spec = h.spec;
    Ok(d)
}

pub fn save_dataset(path: &Path, d: &Dataset) -> Result<()> {
    std::fs::write(path, write_dataset(d)?)?;
    Ok(())
}

pub fn load_dataset(path: &Path) -> Result<Dataset> {
    read_dataset(&std::fs::read(path)?)
}

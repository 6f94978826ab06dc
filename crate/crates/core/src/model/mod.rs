//! The dual-encoder zero-shot classifier.
//!
//! Images are embedded by an MLP [`ImageEncoder`]; classes are fixed unit
//! vectors ([`ClassPrototypeSet`]) standing in for text embeddings. A sample
//! is classified by the prototype with the highest cosine similarity, and
//! the logits fed to softmax are those cosines divided by a temperature.
//!
//! A [`DualEncoderModel`] carries two encoders: the `tuned` one receives
//! gradient updates, the `frozen` one is a snapshot used as a reference.

mod checkpoint;
mod encoder;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, Checkpoint};
pub use encoder::{BoundEncoder, EncoderArch, ImageEncoder, Linear};

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Graph, Tensor, Var};

/// Default softmax temperature for the cosine head.
pub const DEFAULT_TEMPERATURE: f64 = 0.07;

const UNIT_TOL: f64 = 1e-9;

/// Fixed, unit-norm class embeddings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassPrototypeSet {
    names: Vec<String>,
    embeddings: Tensor,
}

impl ClassPrototypeSet {
    /// Validates unit norms and pairwise-distinct rows.
    pub fn new(names: Vec<String>, embeddings: Tensor) -> Result<Self> {
        let (c, _) = embeddings.require_matrix("class prototypes")?;
        if names.len() != c {
            return Err(Error::Dimension(format!("{} names for {c} prototypes", names.len())));
        }
        for i in 0..c {
            let n = crate::tensor::dot(embeddings.row(i), embeddings.row(i)).sqrt();
            if (n - 1.0).abs() > UNIT_TOL {
                return Err(Error::Domain(format!("prototype {i} has norm {n}, expected 1")));
            }
            for j in 0..i {
                if embeddings.row(i) == embeddings.row(j) {
                    return Err(Error::Domain(format!("prototypes {j} and {i} coincide")));
                }
            }
        }
        Ok(Self { names, embeddings })
    }

    /// Seeded Gaussian directions, Gram–Schmidt orthonormalized while the
    /// class count fits in the embedding dimension, otherwise just normalized.
    pub fn random(classes: usize, embed_dim: usize, rng: &mut impl Rng) -> Result<Self> {
        let vectors = random_unit_vectors(classes, embed_dim, rng);
        let names = (0..classes).map(|c| format!("class_{c}")).collect();
        let data = vectors.into_iter().flatten().collect();
        Self::new(names, Tensor::matrix(classes, embed_dim, data)?)
    }

    pub fn len(&self) -> usize {
        self.embeddings.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn embed_dim(&self) -> usize {
        self.embeddings.cols()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn embeddings(&self) -> &Tensor {
        &self.embeddings
    }
}

/// `count` unit vectors in `dim` dimensions. The first `min(count, dim)`
/// are mutually orthogonal; every prefix of the sequence is stable for a
/// given RNG state.
pub(crate) fn random_unit_vectors(count: usize, dim: usize, rng: &mut impl Rng) -> Vec<Vec<f64>> {
    let mut out: Vec<Vec<f64>> = Vec::with_capacity(count);
    while out.len() < count {
        let mut v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        if out.len() < dim {
            for u in &out {
                let proj = crate::tensor::dot(&v, u);
                for (a, b) in v.iter_mut().zip(u) {
                    *a -= proj * b;
                }
            }
        }
        let n = crate::tensor::dot(&v, &v).sqrt();
        if n < 1e-6 {
            continue;
        }
        v.iter_mut().for_each(|a| *a /= n);
        out.push(v);
    }
    out
}

/// Cosine-similarity logits `cos(features_i, prototypes_j) / τ`.
pub fn zero_shot_logits<'g>(features: Var<'g>, prototypes: Var<'g>, temperature: f64) -> Result<Var<'g>> {
    if temperature.is_nan() || temperature <= 0.0 {
        return Err(Error::Domain(format!("temperature must be positive, got {temperature}")));
    }
    let f = features.normalize_rows()?;
    let p = prototypes.normalize_rows()?;
    Ok(f.matmul_t(p)?.scale(1.0 / temperature))
}

/// Value-only version of [`zero_shot_logits`].
pub fn zero_shot_logits_values(features: &Tensor, prototypes: &Tensor, temperature: f64) -> Result<Tensor> {
    let g = Graph::new();
    Ok(zero_shot_logits(g.constant(features.clone()), g.constant(prototypes.clone()), temperature)?.value())
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SnapshotState {
    /// Whether [`DualEncoderModel::snapshot_frozen`] has run.
    pub taken: bool,
    /// Tuned-parameter updates applied since the last snapshot.
    pub updates_since: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DualEncoderModel {
    tuned: ImageEncoder,
    frozen: ImageEncoder,
    prototypes: ClassPrototypeSet,
    temperature: f64,
    snapshot: SnapshotState,
}

impl DualEncoderModel {
    /// The frozen slot starts as a copy of `encoder`; no snapshot is
    /// recorded until [`DualEncoderModel::snapshot_frozen`] runs.
    pub fn new(encoder: ImageEncoder, prototypes: ClassPrototypeSet, temperature: f64) -> Result<Self> {
        if temperature.is_nan() || temperature <= 0.0 {
            return Err(Error::Domain(format!("temperature must be positive, got {temperature}")));
        }
        if encoder.embed_dim() != prototypes.embed_dim() {
            return Err(Error::Dimension(format!(
                "encoder embeds into {} dims, prototypes have {}",
                encoder.embed_dim(),
                prototypes.embed_dim()
            )));
        }
        Ok(Self {
            frozen: encoder.clone(),
            tuned: encoder,
            prototypes,
            temperature,
            snapshot: SnapshotState::default(),
        })
    }

    pub(crate) fn from_parts(
        tuned: ImageEncoder,
        frozen: ImageEncoder,
        prototypes: ClassPrototypeSet,
        temperature: f64,
        snapshot: SnapshotState,
    ) -> Result<Self> {
        if tuned.arch() != frozen.arch() {
            return Err(Error::Dimension("tuned and frozen encoders differ in architecture".into()));
        }
        let mut model = Self::new(tuned, prototypes, temperature)?;
        model.frozen = frozen;
        model.snapshot = snapshot;
        Ok(model)
    }

    pub fn tuned(&self) -> &ImageEncoder {
        &self.tuned
    }

    pub fn tuned_mut(&mut self) -> &mut ImageEncoder {
        &mut self.tuned
    }

    pub fn frozen(&self) -> &ImageEncoder {
        &self.frozen
    }

    pub fn prototypes(&self) -> &ClassPrototypeSet {
        &self.prototypes
    }

    pub fn temperature(&self) -> f64 {
        self.temperature
    }

    pub fn classes(&self) -> usize {
        self.prototypes.len()
    }

    pub fn input_dim(&self) -> usize {
        self.tuned.input_dim()
    }

    pub fn snapshot_state(&self) -> SnapshotState {
        self.snapshot
    }

    /// The same encoders classifying against a different prototype set.
    pub fn with_prototypes(&self, prototypes: ClassPrototypeSet) -> Result<Self> {
        if prototypes.embed_dim() != self.tuned.embed_dim() {
            return Err(Error::Dimension(format!(
                "prototypes have {} dims, encoder embeds into {}",
                prototypes.embed_dim(),
                self.tuned.embed_dim()
            )));
        }
        Ok(Self { prototypes, ..self.clone() })
    }

    /// Copies the tuned parameters into the frozen slot.
    ///
    /// Once a snapshot exists and the tuned encoder has been updated, taking
    /// another one requires `force`.
    pub fn snapshot_frozen(&mut self, force: bool) -> Result<()> {
        if self.snapshot.taken && self.snapshot.updates_since > 0 && !force {
            return Err(Error::Contract(format!(
                "frozen encoder already snapshotted and {} updates applied since; pass force to re-snapshot",
                self.snapshot.updates_since
            )));
        }
        self.frozen = self.tuned.clone();
        self.snapshot = SnapshotState { taken: true, updates_since: 0 };
        Ok(())
    }

    pub(crate) fn note_update(&mut self) {
        self.snapshot.updates_since += 1;
    }

    pub fn encoder(&self, use_frozen: bool) -> &ImageEncoder {
        if use_frozen {
            &self.frozen
        } else {
            &self.tuned
        }
    }

    /// Logits of the selected encoder, value only.
    pub fn logits(&self, x: &Tensor, use_frozen: bool) -> Result<Tensor> {
        let features = self.encoder(use_frozen).encode(x)?;
        zero_shot_logits_values(&features, self.prototypes.embeddings(), self.temperature)
    }

    /// Arg-max class per row; ties go to the lowest class index.
    pub fn predict(&self, x: &Tensor, use_frozen: bool) -> Result<Vec<usize>> {
        Ok(self.logits(x, use_frozen)?.argmax_rows())
    }

    /// SHA-256 over tuned, frozen and prototype values plus τ.
    pub fn digest(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        for v in self
            .tuned
            .flat_params()
            .iter()
            .chain(self.frozen.flat_params().iter())
            .chain(self.prototypes.embeddings().data())
            .chain(std::iter::once(&self.temperature))
        {
            h.update(v.to_le_bytes());
        }
        crate::hex(&h.finalize())
    }
}

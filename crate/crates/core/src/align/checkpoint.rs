use serde::{Deserialize, Serialize};

use super::loss::clamp_log_temperature;
use crate::encoders::{
    embed_sequences, EncoderConfig, ParamGroup, ParamId, ParamStore, ProjectionHead, TextEncoder,
    TextModel, VisionEncoder,
};
use crate::error::{Error, Result};
use crate::rng::SplitMix64;
use crate::tensor::{Scalar, Tensor};

pub const DEFAULT_PROJ_DIM: usize = 64;
/// Initial temperature, `1/0.07`.
pub const INIT_TEMPERATURE: f64 = 1.0 / 0.07;

/// Architecture and provenance stored with a checkpoint.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    /// Encoder variant name, including `untuned`.
    pub variant: String,
    pub seed: u64,
    pub step: u64,
    pub encoder: EncoderConfig,
    pub vocab_size: usize,
    pub proj_dim: usize,
    pub with_vision: bool,
}

/// Every trainable tensor of a dual encoder plus its learned temperature.
#[derive(Clone, Debug, PartialEq)]
pub struct AlignmentCheckpoint<T> {
    pub store: ParamStore<T>,
    pub text: TextEncoder,
    pub vision: Option<VisionEncoder>,
    pub text_head: ProjectionHead,
    pub image_head: Option<ProjectionHead>,
    pub log_t: ParamId,
    pub meta: CheckpointMeta,
}

impl<T: Scalar> AlignmentCheckpoint<T> {
    /// Fresh parameters for `meta`, initialized from `meta.seed`.
    pub fn init(meta: CheckpointMeta) -> Result<Self> {
        let mut rng = SplitMix64::derive(meta.seed, &[0xA119]);
        let mut store = ParamStore::new();
        let text = TextEncoder::new(&mut store, meta.encoder, meta.vocab_size, &mut rng)?;
        let vision = if meta.with_vision {
            Some(VisionEncoder::new(&mut store, meta.encoder, &mut rng)?)
        } else {
            None
        };
        let d = meta.encoder.d_model;
        let text_head = ProjectionHead::new(&mut store, "text_head", d, meta.proj_dim, &mut rng);
        let image_head = meta
            .with_vision
            .then(|| ProjectionHead::new(&mut store, "image_head", d, meta.proj_dim, &mut rng));
        let log_t = store.add(
            "log_t",
            ParamGroup::Temperature,
            Tensor::scalar(T::lit(INIT_TEMPERATURE.ln())),
        );
        Ok(Self {
            store,
            text,
            vision,
            text_head,
            image_head,
            log_t,
            meta,
        })
    }

    /// Starts alignment from a pretrained text encoder; vision and heads are
    /// freshly initialized.
    pub fn from_pretrained(
        pretrained: &TextModel<T>,
        variant: &str,
        seed: u64,
        proj_dim: usize,
        with_vision: bool,
    ) -> Result<Self> {
        let meta = CheckpointMeta {
            variant: variant.to_string(),
            seed,
            step: 0,
            encoder: pretrained.encoder.config,
            vocab_size: pretrained.encoder.vocab_size,
            proj_dim,
            with_vision,
        };
        let mut ck = Self::init(meta)?;
        ck.store.copy_prefix_from(&pretrained.store, "text.")?;
        Ok(ck)
    }

    /// Rebuilds a checkpoint from stored tensors; names and shapes must match
    /// the architecture described by `meta` exactly.
    pub fn from_store(meta: CheckpointMeta, stored: &ParamStore<T>) -> Result<Self> {
        let mut ck = Self::init(meta)?;
        if stored.len() != ck.store.len() {
            return Err(Error::Format(format!(
                "checkpoint has {} tensors, architecture needs {}",
                stored.len(),
                ck.store.len()
            )));
        }
        ck.store.copy_prefix_from(stored, "")?;
        Ok(ck)
    }

    pub fn temperature(&self) -> f64 {
        self.store.get(self.log_t).item().as_f64().exp()
    }

    pub(crate) fn clamp_temperature(&mut self) {
        let t = self.store.get_mut(self.log_t);
        let v = clamp_log_temperature(t.data()[0]);
        t.data_mut()[0] = v;
    }

    /// Unit-norm text embeddings, one row per sequence.
    pub fn embed_texts<S: AsRef<[u32]>>(&self, seqs: &[S]) -> Result<Vec<Vec<T>>> {
        embed_sequences(&self.store, &self.text, &self.text_head, seqs, 256)
    }
}

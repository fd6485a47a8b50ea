use super::layers::{Block, EncoderConfig, LayerNorm, Linear, ProjectionHead, INIT_STD};
use super::params::{Bound, ParamGroup, ParamId, ParamStore};
use crate::corpus::{CHANNELS, IMAGE_SIZE};
use crate::error::Result;
use crate::rng::SplitMix64;
use crate::tensor::{Scalar, Tape, Tensor, TensorError, Var};

pub const PATCH: usize = 8;
pub const PATCHES_PER_SIDE: usize = IMAGE_SIZE / PATCH;
pub const NUM_PATCHES: usize = PATCHES_PER_SIDE * PATCHES_PER_SIDE;
pub const PATCH_PIXELS: usize = CHANNELS * PATCH * PATCH;

/// Rearranges `[3×32×32]` images into `[n·16 × 192]` patch rows. Patches are
/// taken in row-major grid order; each row is channel-major.
pub fn patchify<T: Scalar>(images: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let expect = [CHANNELS, IMAGE_SIZE, IMAGE_SIZE];
    let mut out = Vec::with_capacity(images.len() * NUM_PATCHES * PATCH_PIXELS);
    for img in images {
        if img.shape() != expect {
            return Err(TensorError::ShapeMismatch {
                op: "encode_image",
                lhs: img.shape().to_vec(),
                rhs: expect.to_vec(),
            }
            .into());
        }
        if !img.is_finite() {
            return Err(TensorError::NonFinite { op: "encode_image" }.into());
        }
        let d = img.data();
        for py in 0..PATCHES_PER_SIDE {
            for px in 0..PATCHES_PER_SIDE {
                for c in 0..CHANNELS {
                    for y in 0..PATCH {
                        let row = c * IMAGE_SIZE * IMAGE_SIZE + (py * PATCH + y) * IMAGE_SIZE;
                        let start = row + px * PATCH;
                        out.extend_from_slice(&d[start..start + PATCH]);
                    }
                }
            }
        }
    }
    Ok(Tensor::new(vec![images.len() * NUM_PATCHES, PATCH_PIXELS], out)?)
}

#[derive(Clone, Debug, PartialEq)]
pub struct VisionEncoder {
    pub config: EncoderConfig,
    pub patch: Linear,
    pub pos_emb: ParamId,
    pub blocks: Vec<Block>,
    pub ln_f: LayerNorm,
}

impl VisionEncoder {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        config: EncoderConfig,
        rng: &mut SplitMix64,
    ) -> Result<Self> {
        config.validate()?;
        let g = ParamGroup::VisionEncoder;
        let d = config.d_model;
        let patch = Linear::normal(store, "vision.patch", g, PATCH_PIXELS, d, rng);
        let pos_emb = store.normal("vision.pos_emb", g, &[NUM_PATCHES, d], INIT_STD, rng);
        let blocks = (0..config.layers)
            .map(|i| Block::new(store, &format!("vision.block{i}"), g, &config, rng))
            .collect();
        let ln_f = LayerNorm::new(store, "vision.ln_f", g, d);
        Ok(Self {
            config,
            patch,
            pos_emb,
            blocks,
            ln_f,
        })
    }

    /// Mean-pooled patch states `[n × d]` for patch rows from [`patchify`].
    pub fn pooled<T: Scalar>(&self, tape: &mut Tape<T>, p: &Bound, patches: Tensor<T>) -> Result<Var> {
        let n = patches.shape()[0] / NUM_PATCHES;
        let x = tape.constant(patches);
        let x = self.patch.forward(tape, p, x)?;
        let pos: Vec<usize> = (0..n).flat_map(|_| 0..NUM_PATCHES).collect();
        let pe = tape.embedding(p.var(self.pos_emb), &pos)?;
        let mut h = tape.add(x, pe)?;
        for b in &self.blocks {
            h = b.forward(tape, p, h, n, NUM_PATCHES, self.config.heads, None)?;
        }
        let h = self.ln_f.forward(tape, p, h)?;
        let h = tape.reshape(h, &[n, NUM_PATCHES, self.config.d_model])?;
        Ok(tape.masked_mean(h, 1, None)?)
    }

    pub fn encode<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        p: &Bound,
        head: &ProjectionHead,
        images: &[&Tensor<T>],
    ) -> Result<Var> {
        let patches = patchify(images)?;
        let pooled = self.pooled(tape, p, patches)?;
        head.forward(tape, p, pooled)
    }
}

/// Embeds one image with frozen parameters.
pub fn encode_image<T: Scalar>(
    store: &ParamStore<T>,
    encoder: &VisionEncoder,
    head: &ProjectionHead,
    image: &Tensor<T>,
) -> Result<Vec<T>> {
    let mut tape = Tape::new();
    let bound = store.bind(&mut tape, |_| false);
    let e = encoder.encode(&mut tape, &bound, head, &[image])?;
    Ok(tape.value(e).data().to_vec())
}

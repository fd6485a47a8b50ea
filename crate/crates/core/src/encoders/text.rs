use super::layers::{Block, EncoderConfig, LayerNorm, ProjectionHead, INIT_STD};
use super::params::{Bound, ParamGroup, ParamId, ParamStore};
use crate::corpus::PAD;
use crate::error::{Error, Result};
use crate::rng::SplitMix64;
use crate::tensor::{Scalar, Tape, Var};

/// Padded token ids with a non-padding mask, `[batch×seq]` row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenBatch {
    pub ids: Vec<usize>,
    pub mask: Vec<bool>,
    pub batch: usize,
    pub seq: usize,
}

impl TokenBatch {
    /// Pads each sequence with `PAD` to the longest one in the batch.
    pub fn from_sequences<S: AsRef<[u32]>>(seqs: &[S]) -> Result<Self> {
        if seqs.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let seq = seqs.iter().map(|s| s.as_ref().len()).max().unwrap_or(0);
        if seqs.iter().any(|s| s.as_ref().is_empty()) {
            return Err(Error::AllPadding);
        }
        let mut ids = Vec::with_capacity(seqs.len() * seq);
        let mut mask = Vec::with_capacity(seqs.len() * seq);
        for s in seqs {
            let s = s.as_ref();
            ids.extend(s.iter().map(|&t| t as usize));
            ids.extend(std::iter::repeat(PAD as usize).take(seq - s.len()));
            mask.extend(std::iter::repeat(true).take(s.len()));
            mask.extend(std::iter::repeat(false).take(seq - s.len()));
        }
        Ok(Self {
            ids,
            mask,
            batch: seqs.len(),
            seq,
        })
    }

    /// Explicit ids and mask; every row needs at least one unmasked position.
    pub fn new(ids: Vec<usize>, mask: Vec<bool>, batch: usize, seq: usize) -> Result<Self> {
        if ids.len() != batch * seq || mask.len() != batch * seq || batch == 0 {
            return Err(Error::Format(format!(
                "token batch of {} ids / {} mask entries does not match {batch}×{seq}",
                ids.len(),
                mask.len()
            )));
        }
        if mask.chunks(seq).any(|row| !row.iter().any(|&m| m)) {
            return Err(Error::AllPadding);
        }
        Ok(Self {
            ids,
            mask,
            batch,
            seq,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TextEncoder {
    pub config: EncoderConfig,
    pub vocab_size: usize,
    pub tok_emb: ParamId,
    pub pos_emb: ParamId,
    pub blocks: Vec<Block>,
    pub ln_f: LayerNorm,
}

impl TextEncoder {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        config: EncoderConfig,
        vocab_size: usize,
        rng: &mut SplitMix64,
    ) -> Result<Self> {
        config.validate()?;
        let g = ParamGroup::TextEncoder;
        let d = config.d_model;
        let tok_emb = store.normal("text.tok_emb", g, &[vocab_size, d], INIT_STD, rng);
        let pos_emb = store.normal("text.pos_emb", g, &[config.max_len, d], INIT_STD, rng);
        let blocks = (0..config.layers)
            .map(|i| Block::new(store, &format!("text.block{i}"), g, &config, rng))
            .collect();
        let ln_f = LayerNorm::new(store, "text.ln_f", g, d);
        Ok(Self {
            config,
            vocab_size,
            tok_emb,
            pos_emb,
            blocks,
            ln_f,
        })
    }

    /// Contextual token states `[batch·seq × d]`.
    pub fn hidden<T: Scalar>(&self, tape: &mut Tape<T>, p: &Bound, batch: &TokenBatch) -> Result<Var> {
        if batch.seq > self.config.max_len {
            return Err(Error::Format(format!(
                "sequence length {} exceeds max_len {}",
                batch.seq, self.config.max_len
            )));
        }
        let x = tape.embedding(p.var(self.tok_emb), &batch.ids)?;
        let pos: Vec<usize> = (0..batch.batch).flat_map(|_| 0..batch.seq).collect();
        let pe = tape.embedding(p.var(self.pos_emb), &pos)?;
        let mut h = tape.add(x, pe)?;
        for b in &self.blocks {
            h = b.forward(
                tape,
                p,
                h,
                batch.batch,
                batch.seq,
                self.config.heads,
                Some(&batch.mask),
            )?;
        }
        self.ln_f.forward(tape, p, h)
    }

    /// Mask-aware mean of the final token states, `[batch × d]`.
    pub fn pooled<T: Scalar>(&self, tape: &mut Tape<T>, p: &Bound, batch: &TokenBatch) -> Result<Var> {
        let h = self.hidden(tape, p, batch)?;
        let h = tape.reshape(h, &[batch.batch, batch.seq, self.config.d_model])?;
        Ok(tape.masked_mean(h, 1, Some(&batch.mask))?)
    }

    /// Unit-norm sentence embeddings `[batch × p]`.
    pub fn encode<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        p: &Bound,
        head: &ProjectionHead,
        batch: &TokenBatch,
    ) -> Result<Var> {
        let pooled = self.pooled(tape, p, batch)?;
        head.forward(tape, p, pooled)
    }
}

/// Embeds one token sequence with frozen parameters.
pub fn encode_text<T: Scalar>(
    store: &ParamStore<T>,
    encoder: &TextEncoder,
    head: &ProjectionHead,
    tokens: &[u32],
    mask: &[bool],
) -> Result<Vec<T>> {
    let ids = tokens.iter().map(|&t| t as usize).collect();
    let batch = TokenBatch::new(ids, mask.to_vec(), 1, tokens.len())?;
    let mut tape = Tape::new();
    let bound = store.bind(&mut tape, |_| false);
    let e = encoder.encode(&mut tape, &bound, head, &batch)?;
    Ok(tape.value(e).data().to_vec())
}

/// Embeds many sequences with frozen parameters, `chunk` at a time; rows
/// come back in input order.
pub fn embed_sequences<T: Scalar, S: AsRef<[u32]>>(
    store: &ParamStore<T>,
    encoder: &TextEncoder,
    head: &ProjectionHead,
    seqs: &[S],
    chunk: usize,
) -> Result<Vec<Vec<T>>> {
    let mut out = Vec::with_capacity(seqs.len());
    for part in seqs.chunks(chunk.max(1)) {
        let batch = TokenBatch::from_sequences(part)?;
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape, |_| false);
        let e = encoder.encode(&mut tape, &bound, head, &batch)?;
        out.extend(tape.value(e).data().chunks(head.dim).map(<[T]>::to_vec));
    }
    Ok(out)
}

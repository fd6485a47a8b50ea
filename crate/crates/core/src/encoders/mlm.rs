use serde::{Deserialize, Serialize};

use super::layers::EncoderConfig;
use super::params::{GroupAdam, ParamGroup, ParamStore};
use super::text::{TokenBatch, TextEncoder};
use crate::corpus::{CaptionRecord, Languages, MASK};
use crate::error::{Error, Result};
use crate::rng::SplitMix64;
use crate::tensor::{Scalar, Tape, Var};

/// A text encoder with its own parameter store, as produced by pretraining.
#[derive(Clone, Debug, PartialEq)]
pub struct TextModel<T> {
    pub store: ParamStore<T>,
    pub encoder: TextEncoder,
}

impl<T: Scalar> TextModel<T> {
    pub fn init(config: EncoderConfig, vocab_size: usize, seed: u64) -> Result<Self> {
        let mut rng = SplitMix64::derive(seed, &[0x7E47]);
        let mut store = ParamStore::new();
        let encoder = TextEncoder::new(&mut store, config, vocab_size, &mut rng)?;
        Ok(Self { store, encoder })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MlmConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub mask_prob: f64,
    pub seed: u64,
}

impl Default for MlmConfig {
    fn default() -> Self {
        Self {
            epochs: 4,
            batch_size: 64,
            lr: 1e-3,
            mask_prob: 0.15,
            seed: 0,
        }
    }
}

/// Vocabulary ids of every pretraining-seen language, in id order.
fn seen_candidates(roster: &Languages) -> Vec<usize> {
    (0..roster.vocab.len() as u32)
        .filter(|&id| {
            roster
                .vocab
                .owner(id)
                .is_some_and(|l| roster.specs[l].pretrain_seen)
        })
        .map(|id| id as usize)
        .collect()
}

fn check_corpus(corpus: &[CaptionRecord], roster: &Languages) -> Result<()> {
    if corpus.is_empty() {
        return Err(Error::EmptyDataset);
    }
    for rec in corpus {
        for &t in &rec.tokens {
            match roster.vocab.owner(t) {
                Some(l) if !roster.specs[l].pretrain_seen => {
                    return Err(Error::UnseenLanguageToken(roster.vocab.token(t)?.to_string()))
                }
                None if t as usize >= roster.vocab.len() => return Err(Error::UnknownToken(t as usize)),
                _ => {}
            }
        }
    }
    Ok(())
}

/// Masks each token with probability `p`, at least one per sentence.
fn mask_sentence(tokens: &[u32], p: f64, rng: &mut SplitMix64) -> Vec<usize> {
    let mut picked: Vec<usize> = (0..tokens.len()).filter(|_| rng.bernoulli(p)).collect();
    if picked.is_empty() {
        picked.push(rng.below_usize(tokens.len()));
    }
    picked
}

/// Logits of the masked positions against the given candidate rows of the
/// (tied) token embedding table.
fn masked_logits<T: Scalar>(
    tape: &mut Tape<T>,
    model: &TextModel<T>,
    bound: &super::params::Bound,
    batch: &TokenBatch,
    positions: &[usize],
    candidates: &[usize],
) -> Result<Var> {
    let h = model.encoder.hidden(tape, bound, batch)?;
    let g = tape.embedding(h, positions)?;
    let cand = tape.embedding(bound.var(model.encoder.tok_emb), candidates)?;
    let ct = tape.transpose(cand)?;
    Ok(tape.matmul(g, ct)?)
}

/// Masked-token pretraining on seen-language text. Output logits are tied to
/// the token embeddings and restricted to seen-language words, so rows of
/// unseen-language tokens never receive a gradient. Returns per-step losses.
pub fn pretrain_text_mlm<T: Scalar>(
    model: &mut TextModel<T>,
    corpus: &[CaptionRecord],
    roster: &Languages,
    cfg: &MlmConfig,
) -> Result<Vec<f64>> {
    check_corpus(corpus, roster)?;
    let candidates = seen_candidates(roster);
    let mut cand_index = vec![usize::MAX; roster.vocab.len()];
    for (i, &c) in candidates.iter().enumerate() {
        cand_index[c] = i;
    }
    let mut opt = GroupAdam::new(&model.store, |_| cfg.lr);
    let mut losses = Vec::new();
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    for epoch in 0..cfg.epochs {
        let mut rng = SplitMix64::derive(cfg.seed, &[0x3A5C, epoch as u64]);
        rng.shuffle(&mut order);
        for chunk in order.chunks(cfg.batch_size.max(1)) {
            let mut seqs = Vec::with_capacity(chunk.len());
            let mut picks = Vec::with_capacity(chunk.len());
            for &i in chunk {
                let toks = &corpus[i].tokens;
                let pick = mask_sentence(toks, cfg.mask_prob, &mut rng);
                let mut masked = toks.clone();
                for &j in &pick {
                    masked[j] = MASK;
                }
                seqs.push(masked);
                picks.push(pick);
            }
            let batch = TokenBatch::from_sequences(&seqs)?;
            let mut positions = Vec::new();
            let mut targets = Vec::new();
            for (b, (pick, &i)) in picks.iter().zip(chunk).enumerate() {
                for &j in pick {
                    positions.push(b * batch.seq + j);
                    targets.push(cand_index[corpus[i].tokens[j] as usize]);
                }
            }
            let mut tape = Tape::new();
            let bound = model.store.bind(&mut tape, |g| g == ParamGroup::TextEncoder);
            let logits = masked_logits(&mut tape, model, &bound, &batch, &positions, &candidates)?;
            let loss = tape.softmax_cross_entropy(logits, &targets)?;
            let lv = tape.value(loss).item().as_f64();
            if !lv.is_finite() {
                return Err(Error::NonFiniteLoss(losses.len()));
            }
            losses.push(lv);
            let grads = tape.backward(loss)?;
            opt.step(&mut model.store, &bound, &grads)?;
        }
    }
    Ok(losses)
}

/// Top-1 recovery of one masked token per sentence, predicted over the whole
/// vocabulary.
pub fn mlm_recovery<T: Scalar>(
    model: &TextModel<T>,
    corpus: &[CaptionRecord],
    seed: u64,
) -> Result<f64> {
    if corpus.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let all: Vec<usize> = (0..model.encoder.vocab_size).collect();
    let mut rng = SplitMix64::derive(seed, &[0x4EC0]);
    let mut correct = 0usize;
    for chunk in corpus.chunks(128) {
        let mut seqs = Vec::new();
        let mut picks = Vec::new();
        for rec in chunk {
            let j = rng.below_usize(rec.tokens.len());
            let mut s = rec.tokens.clone();
            s[j] = MASK;
            seqs.push(s);
            picks.push((j, rec.tokens[j] as usize));
        }
        let batch = TokenBatch::from_sequences(&seqs)?;
        let positions: Vec<usize> = picks
            .iter()
            .enumerate()
            .map(|(b, &(j, _))| b * batch.seq + j)
            .collect();
        let mut tape = Tape::new();
        let bound = model.store.bind(&mut tape, |_| false);
        let logits = masked_logits(&mut tape, model, &bound, &batch, &positions, &all)?;
        let v = tape.value(logits).data();
        for (row, &(_, target)) in v.chunks(all.len()).zip(&picks) {
            let mut best = 0;
            for (k, &x) in row.iter().enumerate() {
                if x > row[best] {
                    best = k;
                }
            }
            correct += usize::from(best == target);
        }
    }
    Ok(correct as f64 / corpus.len() as f64)
}

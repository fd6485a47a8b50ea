use serde::{Deserialize, Serialize};

use crate::align::AlignmentCheckpoint;
use crate::corpus::{Languages, ParallelEvalSet};
use crate::error::{Error, Result};
use crate::tensor::Scalar;

pub const ROW_NORM_TOLERANCE: f64 = 1e-5;

/// Unit-norm sentence embeddings of one language, rows ordered by id.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingMatrix {
    pub lang: String,
    pub ids: Vec<u64>,
    pub dim: usize,
    pub data: Vec<f32>,
}

impl EmbeddingMatrix {
    pub fn new(lang: impl Into<String>, ids: Vec<u64>, dim: usize, data: Vec<f32>) -> Result<Self> {
        if dim == 0 || data.len() != ids.len() * dim {
            return Err(Error::Format(format!(
                "{} values do not form {} rows of width {dim}",
                data.len(),
                ids.len()
            )));
        }
        for (i, row) in data.chunks(dim).enumerate() {
            let norm = row.iter().map(|&x| x as f64 * x as f64).sum::<f64>().sqrt();
            if (norm - 1.0).abs() > ROW_NORM_TOLERANCE {
                return Err(Error::Unnormalized { row: i, norm });
            }
        }
        Ok(Self {
            lang: lang.into(),
            ids,
            dim,
            data,
        })
    }

    pub fn rows(&self) -> usize {
        self.ids.len()
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }
}

/// Embeds every language of the evaluation set with the checkpoint's text
/// tower.
pub fn embed_eval_set<T: Scalar>(
    ck: &AlignmentCheckpoint<T>,
    set: &ParallelEvalSet,
) -> Result<Vec<EmbeddingMatrix>> {
    set.langs
        .iter()
        .zip(&set.records)
        .map(|(lang, recs)| {
            let seqs: Vec<&[u32]> = recs.iter().map(|r| r.tokens.as_slice()).collect();
            if let Some(&bad) = seqs
                .iter()
                .flat_map(|s| s.iter())
                .find(|&&t| t as usize >= ck.meta.vocab_size)
            {
                return Err(Error::UnknownToken(bad as usize));
            }
            let rows = ck.embed_texts(&seqs)?;
            let data = rows.iter().flatten().map(|x| x.as_f32()).collect();
            EmbeddingMatrix::new(
                lang.clone(),
                (0..recs.len() as u64).collect(),
                ck.meta.proj_dim,
                data,
            )
        })
        .collect()
}

fn dot(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64).sum()
}

/// Index of the best-scoring target row for each source row; ties go to the
/// lowest index.
pub fn nearest_targets(src: &EmbeddingMatrix, tgt: &EmbeddingMatrix) -> Result<Vec<usize>> {
    if src.dim != tgt.dim {
        return Err(Error::Format(format!(
            "embedding widths differ: {} vs {}",
            src.dim, tgt.dim
        )));
    }
    if tgt.rows() == 0 {
        return Err(Error::EmptyDataset);
    }
    Ok((0..src.rows())
        .map(|i| {
            let q = src.row(i);
            let mut best = 0;
            let mut best_score = dot(q, tgt.row(0));
            for j in 1..tgt.rows() {
                let s = dot(q, tgt.row(j));
                if s > best_score {
                    best = j;
                    best_score = s;
                }
            }
            best
        })
        .collect())
}

/// Fraction of source sentences whose nearest target is their translation.
pub fn retrieval_accuracy(src: &EmbeddingMatrix, tgt: &EmbeddingMatrix) -> Result<f64> {
    if src.rows() != tgt.rows() {
        return Err(Error::Format(format!(
            "row counts differ: {} vs {}",
            src.rows(),
            tgt.rows()
        )));
    }
    if let Some(row) = (0..src.rows()).find(|&i| src.ids[i] != tgt.ids[i]) {
        return Err(Error::IdMismatch {
            row,
            left: src.ids[row].to_string(),
            right: tgt.ids[row].to_string(),
        });
    }
    let best = nearest_targets(src, tgt)?;
    let hits = best
        .iter()
        .enumerate()
        .filter(|&(i, &j)| tgt.ids[j] == src.ids[i])
        .count();
    Ok(hits as f64 / src.rows() as f64)
}

/// Which aggregate each evaluated language belongs to.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LanguageRoles {
    pub pivot: String,
    pub pretrain_seen: Vec<String>,
    pub pretrain_unseen: Vec<String>,
    pub target_unseen: String,
}

impl LanguageRoles {
    /// Non-pivot languages split by pretraining exposure, with `target` the
    /// singled-out unseen language.
    pub fn from_roster(roster: &Languages, target: &str) -> Result<Self> {
        let pivot = roster.pivot().id.clone();
        let t = roster.get(target)?;
        if t.pretrain_seen {
            return Err(Error::Config(format!(
                "target language `{target}` must be pretraining-unseen"
            )));
        }
        let others = roster.specs.iter().filter(|l| l.id != pivot);
        let (seen, unseen): (Vec<_>, Vec<_>) = others.partition(|l| l.pretrain_seen);
        Ok(Self {
            pivot,
            pretrain_seen: seen.into_iter().map(|l| l.id.clone()).collect(),
            pretrain_unseen: unseen.into_iter().map(|l| l.id.clone()).collect(),
            target_unseen: target.to_string(),
        })
    }

    pub fn all(&self) -> Vec<String> {
        self.pretrain_seen
            .iter()
            .chain(&self.pretrain_unseen)
            .cloned()
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetrievalReport {
    pub encoder: String,
    pub per_language: Vec<(String, f64)>,
    pub all: f64,
    pub pretrain_seen: f64,
    pub pretrain_unseen: f64,
    pub target_unseen: f64,
}

impl RetrievalReport {
    pub fn accuracy(&self, lang: &str) -> Option<f64> {
        self.per_language
            .iter()
            .find(|(l, _)| l == lang)
            .map(|&(_, a)| a)
    }

    pub fn mean_of(&self, langs: &[String]) -> Result<f64> {
        mean(
            &langs
                .iter()
                .map(|l| {
                    self.accuracy(l)
                        .ok_or_else(|| Error::UnknownLanguage(l.clone()))
                })
                .collect::<Result<Vec<_>>>()?,
        )
    }
}

fn mean(xs: &[f64]) -> Result<f64> {
    if xs.is_empty() {
        return Err(Error::EmptyDataset);
    }
    Ok(xs.iter().sum::<f64>() / xs.len() as f64)
}

/// Subset means of per-language accuracies. Every listed language must have
/// exactly one pretraining role.
pub fn aggregate_retrieval(
    encoder: &str,
    per_language: &[(String, f64)],
    roles: &LanguageRoles,
) -> Result<RetrievalReport> {
    for (l, a) in per_language {
        let n = roles.pretrain_seen.iter().filter(|x| *x == l).count()
            + roles.pretrain_unseen.iter().filter(|x| *x == l).count();
        if n != 1 {
            return Err(Error::UnknownLanguage(l.clone()));
        }
        if !(0.0..=1.0).contains(a) {
            return Err(Error::Format(format!("accuracy {a} for `{l}` outside [0, 1]")));
        }
    }
    let pick = |set: &[String]| -> Result<f64> {
        mean(
            &per_language
                .iter()
                .filter(|(l, _)| set.contains(l))
                .map(|&(_, a)| a)
                .collect::<Vec<_>>(),
        )
    };
    let all: Vec<f64> = per_language.iter().map(|&(_, a)| a).collect();
    Ok(RetrievalReport {
        encoder: encoder.to_string(),
        per_language: per_language.to_vec(),
        all: mean(&all)?,
        pretrain_seen: pick(&roles.pretrain_seen)?,
        pretrain_unseen: pick(&roles.pretrain_unseen)?,
        target_unseen: pick(std::slice::from_ref(&roles.target_unseen))?,
    })
}

/// X→pivot accuracy for every non-pivot language, then subset means.
pub fn evaluate_retrieval(
    encoder: &str,
    matrices: &[EmbeddingMatrix],
    roles: &LanguageRoles,
) -> Result<RetrievalReport> {
    let pivot = matrices
        .iter()
        .find(|m| m.lang == roles.pivot)
        .ok_or_else(|| Error::UnknownLanguage(roles.pivot.clone()))?;
    let per = matrices
        .iter()
        .filter(|m| m.lang != roles.pivot)
        .map(|m| Ok((m.lang.clone(), retrieval_accuracy(m, pivot)?)))
        .collect::<Result<Vec<_>>>()?;
    aggregate_retrieval(encoder, &per, roles)
}

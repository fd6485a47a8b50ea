//! In-memory stages of the experiment. The subcommands wrap these with
//! artifact I/O.

use super::config::{RunConfig, Stage};
use crate::align::{train_alignment, AlignmentCheckpoint, LogRow};
use crate::corpus::{
    build_alignment_dataset, build_nli_dataset, code_switch, build_parallel_eval_set, build_pretraining_corpus,
    AlignmentDataset, CaptionRecord, Languages, NliRecord, NliSplit, ParallelEvalSet, Variant,
};
use crate::encoders::{pretrain_text_mlm, TextModel};
use crate::error::{Error, Result};
use crate::eval::{
    clique_compactness, embed_eval_set, evaluate_retrieval, eval_nli, nli_dataset_features,
    train_nli_probe, tsne_project, EmbeddingMatrix, LanguageRoles, NliReport, RetrievalReport,
    TsneLayout,
};
use crate::Real;

pub const UNTUNED: &str = "untuned";

/// An encoder row of the experiment tables: a trained variant or the
/// untuned baseline.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EncoderKind {
    Untuned,
    Aligned(Variant),
}

impl EncoderKind {
    pub fn parse(s: &str) -> Result<Self> {
        if s == UNTUNED {
            Ok(EncoderKind::Untuned)
        } else {
            s.parse().map(EncoderKind::Aligned)
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            EncoderKind::Untuned => UNTUNED,
            EncoderKind::Aligned(v) => v.name(),
        }
    }
}

/// Languages a variant is fine-tuned on, pivot first.
pub fn variant_languages(cfg: &RunConfig, kind: EncoderKind) -> Vec<String> {
    let ft = &cfg.finetune_languages.0;
    match kind {
        EncoderKind::Untuned => Vec::new(),
        EncoderKind::Aligned(Variant::EngOnly) => ft[..1].to_vec(),
        EncoderKind::Aligned(Variant::EngPivot | Variant::Multilingual) => ft.clone(),
        EncoderKind::Aligned(Variant::MultilingualPlusUnseen) => {
            let mut l = ft.clone();
            l.push(cfg.unseen_language.clone());
            l
        }
    }
}

pub fn pretraining_corpus(cfg: &RunConfig, roster: &Languages) -> Result<Vec<CaptionRecord>> {
    let seen: Vec<String> = roster
        .specs
        .iter()
        .filter(|s| s.pretrain_seen)
        .map(|s| s.id.clone())
        .collect();
    let base = build_pretraining_corpus(&seen, cfg.pretrain_sentences, cfg.stage_seed(Stage::Data, &[1]), false, cfg.world_bias, roster)?;
    code_switch(&base, &seen, cfg.code_switch, cfg.stage_seed(Stage::Data, &[6]), roster)
}

/// Every variant draws item `i` from the same scene.
pub fn alignment_dataset(cfg: &RunConfig, variant: Variant, roster: &Languages) -> Result<AlignmentDataset> {
    build_alignment_dataset(
        variant,
        cfg.align_items,
        &variant_languages(cfg, EncoderKind::Aligned(variant)),
        cfg.budget,
        cfg.stage_seed(Stage::Data, &[2]),
        roster,
    )
}

pub fn eval_set(cfg: &RunConfig, roster: &Languages) -> Result<ParallelEvalSet> {
    build_parallel_eval_set(cfg.eval_sentences, &roster.ids(), cfg.stage_seed(Stage::Data, &[3]), roster)
}

pub struct NliData {
    pub train: Vec<NliRecord>,
    pub dev: Vec<NliRecord>,
    pub test: Vec<NliRecord>,
}

pub fn nli_data(cfg: &RunConfig, roster: &Languages) -> Result<NliData> {
    let seed = cfg.stage_seed(Stage::Data, &[4]);
    let pivot = vec![roster.pivot().id.clone()];
    Ok(NliData {
        train: build_nli_dataset(cfg.nli_train, &pivot, NliSplit::TrainEn, seed, roster)?,
        dev: build_nli_dataset(cfg.nli_dev, &pivot, NliSplit::DevEn, seed, roster)?,
        test: build_nli_dataset(cfg.nli_test, &roster.ids(), NliSplit::TestMulti, seed, roster)?,
    })
}

pub fn pretrain(cfg: &RunConfig, corpus: &[CaptionRecord], roster: &Languages) -> Result<(TextModel<Real>, Vec<f64>)> {
    let mut model = TextModel::init(cfg.encoder(), roster.vocab.len(), cfg.stage_seed(Stage::Pretrain, &[0]))?;
    let losses = pretrain_text_mlm(&mut model, corpus, roster, &cfg.mlm())?;
    Ok((model, losses))
}

/// The untuned baseline is the pretrained encoder under a fresh random head.
pub fn align(
    cfg: &RunConfig,
    kind: EncoderKind,
    pretrained: &TextModel<Real>,
    dataset: Option<&AlignmentDataset>,
) -> Result<(AlignmentCheckpoint<Real>, Vec<LogRow>)> {
    let seed = cfg.stage_seed(Stage::Align, &[]);
    match kind {
        EncoderKind::Untuned => Ok((
            AlignmentCheckpoint::from_pretrained(pretrained, UNTUNED, seed, cfg.proj_dim, false)?,
            Vec::new(),
        )),
        EncoderKind::Aligned(v) => {
            let data = dataset.ok_or_else(|| Error::InvalidDataset(format!("{v}: no alignment data")))?;
            if data.variant != v {
                return Err(Error::InvalidDataset(format!(
                    "dataset is for {}, expected {v}",
                    data.variant
                )));
            }
            let init = AlignmentCheckpoint::from_pretrained(pretrained, v.name(), seed, cfg.proj_dim, v.uses_images())?;
            train_alignment(data, init, &cfg.schedule(), seed)
        }
    }
}

pub fn retrieval(
    cfg: &RunConfig,
    ck: &AlignmentCheckpoint<Real>,
    set: &ParallelEvalSet,
    roster: &Languages,
) -> Result<(RetrievalReport, Vec<EmbeddingMatrix>)> {
    let roles = LanguageRoles::from_roster(roster, &cfg.unseen_language)?;
    let mats = embed_eval_set(ck, set)?;
    Ok((evaluate_retrieval(&ck.meta.variant, &mats, &roles)?, mats))
}

/// Trains the English-only probe on frozen features, then tests it in every
/// language.
pub fn nli(cfg: &RunConfig, ck: &AlignmentCheckpoint<Real>, data: &NliData, roster: &Languages) -> Result<NliReport> {
    let (tx, ty) = nli_dataset_features(ck, &data.train)?;
    let (dx, dy) = nli_dataset_features(ck, &data.dev)?;
    let probe = train_nli_probe(&tx, &ty, &dx, &dy, &cfg.probe())?;
    let kind = EncoderKind::parse(&ck.meta.variant)?;
    eval_nli(
        &ck.meta.variant,
        &probe,
        ck,
        &data.test,
        &variant_languages(cfg, kind),
        &roster.pivot().id,
    )
}

/// t-SNE of the first `tsne_sentences` eval sentences in the plotted
/// languages, and the clique compactness of the layout.
pub fn project(cfg: &RunConfig, mats: &[EmbeddingMatrix]) -> Result<(TsneLayout, f64)> {
    let k = cfg.tsne_sentences;
    let chosen = cfg
        .tsne_languages
        .0
        .iter()
        .map(|l| {
            let m = mats
                .iter()
                .find(|m| &m.lang == l)
                .ok_or_else(|| Error::UnknownLanguage(l.clone()))?;
            if m.rows() < k {
                return Err(Error::Config(format!("only {} eval sentences in `{l}`", m.rows())));
            }
            EmbeddingMatrix::new(l.clone(), m.ids[..k].to_vec(), m.dim, m.data[..k * m.dim].to_vec())
        })
        .collect::<Result<Vec<_>>>()?;
    let layout = tsne_project(&chosen, &cfg.tsne())?;
    let c = clique_compactness(&layout, &cfg.tsne_languages.0)?;
    Ok((layout, c))
}

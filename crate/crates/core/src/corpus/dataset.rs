use std::collections::HashSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::caption::{plan_caption, CaptionRecord};
use super::language::Languages;
use super::scene::{generate_biased_scene, generate_scene};
use crate::error::{Error, Result};
use crate::rng::{mix64, SplitMix64};

/// Seed domains. Scene ids carry the domain in their top four bits so scenes
/// from different domains can never coincide.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Domain {
    Pretrain = 1,
    PretrainHeldout = 2,
    Align = 3,
    Eval = 4,
    Nli = 5,
}

/// `domain << 60 | (run seed mod 2^24) << 36 | index` with `index < 2^36`.
pub fn scene_id(domain: Domain, seed: u64, index: u64) -> u64 {
    ((domain as u64) << 60) | ((seed & 0xFF_FFFF) << 36) | (index & ((1 << 36) - 1))
}

pub fn domain_of(scene_id: u64) -> u64 {
    scene_id >> 60
}

pub(crate) fn style_seed(seed: u64, domain: Domain, index: u64) -> u64 {
    mix64(mix64(seed ^ ((domain as u64) << 56)) ^ index)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    EngOnly,
    EngPivot,
    Multilingual,
    MultilingualPlusUnseen,
}

impl Variant {
    pub const ALL: [Variant; 4] = [
        Variant::EngOnly,
        Variant::EngPivot,
        Variant::Multilingual,
        Variant::MultilingualPlusUnseen,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::EngOnly => "eng_only",
            Variant::EngPivot => "eng_pivot",
            Variant::Multilingual => "multilingual",
            Variant::MultilingualPlusUnseen => "multilingual_plus_unseen",
        }
    }

    pub fn uses_images(self) -> bool {
        self != Variant::EngPivot
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown variant `{s}`")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BudgetMode {
    /// Same number of items for every variant; adding a language thins the
    /// others.
    FixedTotal,
    /// Same number of items per pretraining language; adding the unseen
    /// language grows the dataset.
    FixedPerLanguage,
}

impl FromStr for BudgetMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fixed_total" => Ok(BudgetMode::FixedTotal),
            "fixed_per_language" => Ok(BudgetMode::FixedPerLanguage),
            _ => Err(Error::Config(format!("unknown budget mode `{s}`"))),
        }
    }
}

impl fmt::Display for BudgetMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BudgetMode::FixedTotal => "fixed_total",
            BudgetMode::FixedPerLanguage => "fixed_per_language",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlignmentItem {
    pub scene_id: u64,
    pub caption: CaptionRecord,
    /// Second caption of a text pair (pivot variant only).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub partner: Option<CaptionRecord>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AlignmentDataset {
    pub variant: Variant,
    pub budget: BudgetMode,
    pub items: Vec<AlignmentItem>,
}

fn check_langs(variant: Variant, langs: &[String], roster: &Languages) -> Result<()> {
    let bad = |msg: String| Err(Error::InvalidDataset(format!("{variant}: {msg}")));
    let mut seen = HashSet::new();
    for l in langs {
        roster.get(l)?;
        if !seen.insert(l) {
            return bad(format!("language `{l}` listed twice"));
        }
    }
    let pivot = &roster.pivot().id;
    let unseen = langs
        .iter()
        .filter(|l| !roster.get(l).map(|s| s.pretrain_seen).unwrap_or(true))
        .count();
    match variant {
        Variant::EngOnly if langs.len() != 1 || &langs[0] != pivot => {
            bad(format!("needs exactly the pivot language `{pivot}`"))
        }
        Variant::EngPivot if langs.len() < 2 || &langs[0] != pivot => {
            bad(format!("needs `{pivot}` first and at least one other language"))
        }
        Variant::Multilingual if langs.len() < 2 => bad("needs at least two languages".into()),
        Variant::MultilingualPlusUnseen if unseen == 0 => {
            bad("must include a pretraining-unseen language".into())
        }
        Variant::MultilingualPlusUnseen if langs.len() < 2 => {
            bad("needs at least two languages".into())
        }
        Variant::EngOnly | Variant::EngPivot | Variant::Multilingual if unseen > 0 => {
            bad("pretraining-unseen languages belong to the plus-unseen variant".into())
        }
        _ => Ok(()),
    }
}

/// Builds one alignment dataset variant. Item `i` always describes the same
/// scene whatever the variant, so variants differ only in language coverage.
pub fn build_alignment_dataset(
    variant: Variant,
    n_items: usize,
    langs: &[String],
    budget: BudgetMode,
    seed: u64,
    roster: &Languages,
) -> Result<AlignmentDataset> {
    check_langs(variant, langs, roster)?;
    let rotation: Vec<&String> = match variant {
        Variant::EngPivot => langs[1..].iter().collect(),
        _ => langs.iter().collect(),
    };
    let seen_in_rotation = rotation
        .iter()
        .filter(|l| roster.get(l).map(|s| s.pretrain_seen).unwrap_or(false))
        .count()
        .max(1);
    let total = match budget {
        BudgetMode::FixedTotal => n_items,
        BudgetMode::FixedPerLanguage => n_items * rotation.len() / seen_in_rotation,
    };
    let pivot = roster.pivot();
    let items = (0..total)
        .map(|i| {
            let id = scene_id(Domain::Align, seed, i as u64);
            let scene = generate_scene(id);
            let plan = plan_caption(&scene, style_seed(seed, Domain::Align, i as u64));
            let lang = roster.get(rotation[i % rotation.len()])?;
            let (caption, partner) = match variant {
                Variant::EngPivot => (
                    CaptionRecord::from_plan(id, &plan, pivot, &roster.vocab)?,
                    Some(CaptionRecord::from_plan(id, &plan, lang, &roster.vocab)?),
                ),
                _ => (CaptionRecord::from_plan(id, &plan, lang, &roster.vocab)?, None),
            };
            Ok(AlignmentItem {
                scene_id: id,
                caption,
                partner,
            })
        })
        .collect::<Result<_>>()?;
    Ok(AlignmentDataset {
        variant,
        budget,
        items,
    })
}

/// Non-parallel monolingual captions for text pretraining: each language
/// describes its own scenes. A positive `world_bias` draws those scenes from
/// [`generate_biased_scene`] so the text carries co-occurrence statistics.
pub fn build_pretraining_corpus(
    langs: &[String],
    n_per_lang: usize,
    seed: u64,
    heldout: bool,
    world_bias: f64,
    roster: &Languages,
) -> Result<Vec<CaptionRecord>> {
    if !(0.0..=1.0).contains(&world_bias) {
        return Err(Error::Config(format!("world bias {world_bias} outside [0, 1]")));
    }
    let domain = if heldout {
        Domain::PretrainHeldout
    } else {
        Domain::Pretrain
    };
    let mut out = Vec::with_capacity(langs.len() * n_per_lang);
    for (li, l) in langs.iter().enumerate() {
        let lang = roster.get(l)?;
        for i in 0..n_per_lang {
            let index = (li * n_per_lang + i) as u64;
            let id = scene_id(domain, seed, index);
            let scene = if world_bias > 0.0 {
                generate_biased_scene(id, world_bias)
            } else {
                generate_scene(id)
            };
            let plan = plan_caption(&scene, style_seed(seed, domain, index));
            out.push(CaptionRecord::from_plan(scene.id, &plan, lang, &roster.vocab)?);
        }
    }
    Ok(out)
}

/// N-way parallel evaluation captions: `records[l][k]` is sentence `k` in
/// language `langs[l]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ParallelEvalSet {
    pub langs: Vec<String>,
    pub records: Vec<Vec<CaptionRecord>>,
}

impl ParallelEvalSet {
    pub fn len(&self) -> usize {
        self.records.first().map_or(0, Vec::len)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn language(&self, lang: &str) -> Result<&[CaptionRecord]> {
        self.langs
            .iter()
            .position(|l| l == lang)
            .map(|i| self.records[i].as_slice())
            .ok_or_else(|| Error::UnknownLanguage(lang.to_string()))
    }
}

/// Evaluation sentences come from their own seed domain. Scenes whose pivot
/// caption duplicates an earlier one are skipped, so every sentence id has a
/// unique correct match.
pub fn build_parallel_eval_set(
    n_sentences: usize,
    langs: &[String],
    seed: u64,
    roster: &Languages,
) -> Result<ParallelEvalSet> {
    if n_sentences < 2 {
        return Err(Error::InvalidDataset(
            "evaluation set needs at least two sentences".into(),
        ));
    }
    let specs = langs
        .iter()
        .map(|l| roster.get(l))
        .collect::<Result<Vec<_>>>()?;
    let mut records = vec![Vec::with_capacity(n_sentences); specs.len()];
    let mut texts = HashSet::new();
    let mut index = 0u64;
    while records[0].len() < n_sentences {
        let scene = generate_scene(scene_id(Domain::Eval, seed, index));
        let plan = plan_caption(&scene, style_seed(seed, Domain::Eval, index));
        index += 1;
        if !texts.insert(plan) {
            continue;
        }
        for (l, spec) in specs.iter().enumerate() {
            records[l].push(CaptionRecord::from_plan(
                scene.id,
                &plan,
                spec,
                &roster.vocab,
            )?);
        }
    }
    Ok(ParallelEvalSet {
        langs: langs.to_vec(),
        records,
    })
}

/// Dictionary code-switching: each record is switched with probability
/// `rate`, and within a switched record each single-concept word is replaced,
/// with probability 1/2, by the same concept's word in another language from
/// `langs`. Word order stays that of the matrix language.
pub fn code_switch(
    corpus: &[CaptionRecord],
    langs: &[String],
    rate: f64,
    seed: u64,
    roster: &Languages,
) -> Result<Vec<CaptionRecord>> {
    let specs = langs.iter().map(|l| roster.get(l)).collect::<Result<Vec<_>>>()?;
    if !(0.0..=1.0).contains(&rate) {
        return Err(Error::Config(format!("code-switch rate {rate} outside [0, 1]")));
    }
    let mut out = Vec::with_capacity(corpus.len());
    for (i, rec) in corpus.iter().enumerate() {
        let mut rng = SplitMix64::derive(seed, &[0xC0DE, i as u64]);
        let mut rec = rec.clone();
        if specs.len() > 1 && rng.bernoulli(rate) {
            let own = roster.get(&rec.lang)?;
            let others: Vec<_> = specs.iter().filter(|s| s.id != own.id).collect();
            let mut words = Vec::with_capacity(rec.tokens.len());
            for t in rec.tokens.iter_mut() {
                let concepts = own.decode(roster.vocab.token(*t)?).unwrap_or(&[]);
                if concepts.len() == 1 && rng.bernoulli(0.5) {
                    let other = others[rng.below_usize(others.len())];
                    *t = roster.vocab.id(other.word(concepts[0]))?;
                }
                words.push(roster.vocab.token(*t)?.to_string());
            }
            rec.text = words.join(" ");
        }
        out.push(rec);
    }
    Ok(out)
}

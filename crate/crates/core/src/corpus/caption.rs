use serde::{Deserialize, Serialize};

use super::language::{Concept, LanguageSpec, Morphology, Relation, Vocabulary, WordOrder};
use super::scene::{Color, Scene, SceneObject, Shape, Size};
use crate::error::{Error, Result};
use crate::rng::SplitMix64;

pub const MAX_SEQ_LEN: usize = 24;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct NounPhrase {
    pub shape: Shape,
    pub color: Option<Color>,
    pub size: Option<Size>,
}

impl NounPhrase {
    pub fn of(obj: &SceneObject, with_color: bool, with_size: bool) -> Self {
        Self {
            shape: obj.shape,
            color: with_color.then_some(obj.color),
            size: with_size.then_some(obj.size),
        }
    }

    /// Whether a scene object fits this description.
    pub fn matches(&self, obj: &SceneObject) -> bool {
        obj.shape == self.shape
            && self.color.map_or(true, |c| c == obj.color)
            && self.size.map_or(true, |s| s == obj.size)
    }
}

/// Language-independent content of a caption.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum CaptionPlan {
    Exists { frame: bool, np: NounPhrase },
    Both { frame: bool, a: NounPhrase, b: NounPhrase },
    Related { a: NounPhrase, rel: Relation, b: NounPhrase },
}

impl CaptionPlan {
    pub fn noun_phrases(&self) -> Vec<NounPhrase> {
        match *self {
            CaptionPlan::Exists { np, .. } => vec![np],
            CaptionPlan::Both { a, b, .. } | CaptionPlan::Related { a, b, .. } => vec![a, b],
        }
    }

    /// Sorted concept multiset; identical across languages for one plan.
    pub fn concept_multiset(&self) -> Vec<Concept> {
        let mut out = Vec::new();
        for np in self.noun_phrases() {
            out.extend(np_concepts(&np, WordOrder::AdjNounSvo));
        }
        match *self {
            CaptionPlan::Exists { frame, .. } => {
                if frame {
                    out.push(Concept::ThereIs);
                }
            }
            CaptionPlan::Both { frame, .. } => {
                out.push(Concept::And);
                if frame {
                    out.push(Concept::ThereIs);
                }
            }
            CaptionPlan::Related { rel, .. } => out.push(Concept::Rel(rel)),
        }
        out.sort();
        out
    }
}

fn np_concepts(np: &NounPhrase, order: WordOrder) -> Vec<Concept> {
    let color = np.color.map(Concept::Color);
    let size = np.size.map(Concept::Size);
    let shape = Some(Concept::Shape(np.shape));
    let art = Some(Concept::Article);
    let seq = match order {
        WordOrder::AdjNounSvo => [art, size, color, shape],
        WordOrder::NounAdjSov => [shape, color, size, art],
        WordOrder::Vso => [art, shape, color, size],
    };
    seq.into_iter().flatten().collect()
}

/// Concept sequence in surface order for a language's template.
pub fn plan_concepts(plan: &CaptionPlan, order: WordOrder) -> Vec<Concept> {
    let np = |n: &NounPhrase| np_concepts(n, order);
    let sov = order == WordOrder::NounAdjSov;
    let mut out = Vec::new();
    match plan {
        CaptionPlan::Exists { frame, np: n } => {
            if *frame && !sov {
                out.push(Concept::ThereIs);
            }
            out.extend(np(n));
            if *frame && sov {
                out.push(Concept::ThereIs);
            }
        }
        CaptionPlan::Both { frame, a, b } => {
            if *frame && !sov {
                out.push(Concept::ThereIs);
            }
            out.extend(np(a));
            out.push(Concept::And);
            out.extend(np(b));
            if *frame && sov {
                out.push(Concept::ThereIs);
            }
        }
        CaptionPlan::Related { a, rel, b } => {
            let r = Concept::Rel(*rel);
            match order {
                WordOrder::AdjNounSvo => {
                    out.extend(np(a));
                    out.push(r);
                    out.extend(np(b));
                }
                WordOrder::NounAdjSov => {
                    out.extend(np(a));
                    out.extend(np(b));
                    out.push(r);
                }
                WordOrder::Vso => {
                    out.push(r);
                    out.extend(np(a));
                    out.extend(np(b));
                }
            }
        }
    }
    out
}

/// Surface tokens of a plan in one language.
pub fn realize_plan(plan: &CaptionPlan, lang: &LanguageSpec) -> Vec<String> {
    let concepts = plan_concepts(plan, lang.order);
    let mut out = Vec::with_capacity(concepts.len());
    let mut i = 0;
    while i < concepts.len() {
        if lang.morphology == Morphology::Agglutinative {
            if let (Concept::Shape(s), Some(Concept::Color(c))) = (concepts[i], concepts.get(i + 1))
            {
                if let Some(w) = lang.fused_word(*c, s) {
                    out.push(w.to_string());
                    i += 2;
                    continue;
                }
            }
        }
        out.push(lang.word(concepts[i]).to_string());
        i += 1;
    }
    out
}

fn parse_np(concepts: &[Concept]) -> Option<NounPhrase> {
    let (mut shape, mut color, mut size, mut art) = (None, None, None, 0);
    for c in concepts {
        match *c {
            Concept::Shape(s) if shape.is_none() => shape = Some(s),
            Concept::Color(x) if color.is_none() => color = Some(x),
            Concept::Size(x) if size.is_none() => size = Some(x),
            Concept::Article => art += 1,
            _ => return None,
        }
    }
    (art == 1).then_some(())?;
    Some(NounPhrase {
        shape: shape?,
        color,
        size,
    })
}

fn split_nps(concepts: &[Concept], order: WordOrder) -> Option<Vec<NounPhrase>> {
    let mut groups: Vec<Vec<Concept>> = Vec::new();
    let mut cur = Vec::new();
    for &c in concepts {
        if order == WordOrder::Vso && c == Concept::Article && !cur.is_empty() {
            groups.push(std::mem::take(&mut cur));
        }
        cur.push(c);
        let ends = match order {
            WordOrder::AdjNounSvo => matches!(c, Concept::Shape(_)),
            WordOrder::NounAdjSov => c == Concept::Article,
            WordOrder::Vso => false,
        };
        if ends {
            groups.push(std::mem::take(&mut cur));
        }
    }
    if !cur.is_empty() {
        groups.push(cur);
    }
    groups.iter().map(|g| parse_np(g)).collect()
}

/// Recovers the plan behind a surface caption. Rejects anything the
/// language's grammar would not produce.
pub fn parse_caption<S: AsRef<str>>(tokens: &[S], lang: &LanguageSpec) -> Result<CaptionPlan> {
    let mut concepts = Vec::new();
    for t in tokens {
        let t = t.as_ref();
        let c = lang
            .decode(t)
            .ok_or_else(|| Error::UnknownWord(format!("{t} ({})", lang.id)))?;
        concepts.extend_from_slice(c);
    }
    let frame = concepts.contains(&Concept::ThereIs);
    let rel = concepts.iter().find_map(|c| match c {
        Concept::Rel(r) => Some(*r),
        _ => None,
    });
    let both = concepts.contains(&Concept::And);
    let rest: Vec<Concept> = concepts
        .iter()
        .copied()
        .filter(|c| !matches!(c, Concept::ThereIs | Concept::Rel(_) | Concept::And))
        .collect();
    let nps = split_nps(&rest, lang.order);
    let plan = match (nps.as_deref(), rel, both) {
        (Some([np]), None, false) => Some(CaptionPlan::Exists { frame, np: *np }),
        (Some([a, b]), None, true) => Some(CaptionPlan::Both {
            frame,
            a: *a,
            b: *b,
        }),
        (Some([a, b]), Some(rel), false) if !frame => Some(CaptionPlan::Related {
            a: *a,
            rel,
            b: *b,
        }),
        _ => None,
    };
    match plan {
        Some(p) if realize_plan(&p, lang).iter().map(String::as_str).eq(tokens.iter().map(|t| t.as_ref())) => {
            Ok(p)
        }
        _ => Err(Error::Format(format!(
            "ungrammatical {} caption: {}",
            lang.id,
            tokens.iter().map(|t| t.as_ref()).collect::<Vec<_>>().join(" ")
        ))),
    }
}

/// Style choices for a scene: which objects to mention, whether to relate
/// them, and which optional words to include. Depends only on the scene and
/// the style seed, so every language realizes the same plan.
pub fn plan_caption(scene: &Scene, style_seed: u64) -> CaptionPlan {
    let mut rng = SplitMix64::derive(style_seed, &[0xCA97]);
    let objs = &scene.objects;
    let frame = rng.bernoulli(0.5);
    if objs.len() >= 2 && rng.bernoulli(0.6) {
        let i = rng.below_usize(objs.len());
        let j = (i + 1 + rng.below_usize(objs.len() - 1)) % objs.len();
        let (a, b) = (&objs[i], &objs[j]);
        let npa = NounPhrase::of(a, true, rng.bernoulli(0.5));
        let npb = NounPhrase::of(b, true, rng.bernoulli(0.5));
        let mut rels = Vec::new();
        if a.cell.1 != b.cell.1 {
            rels.push(if a.cell.1 < b.cell.1 {
                Relation::LeftOf
            } else {
                Relation::RightOf
            });
        }
        if a.cell.0 != b.cell.0 {
            rels.push(if a.cell.0 < b.cell.0 {
                Relation::Above
            } else {
                Relation::Below
            });
        }
        let rel = rels[rng.below_usize(rels.len())];
        if rng.bernoulli(0.7) {
            CaptionPlan::Related { a: npa, rel, b: npb }
        } else {
            CaptionPlan::Both {
                frame,
                a: npa,
                b: npb,
            }
        }
    } else {
        let o = &objs[rng.below_usize(objs.len())];
        CaptionPlan::Exists {
            frame,
            np: NounPhrase::of(o, true, rng.bernoulli(0.5)),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaptionRecord {
    pub scene_id: u64,
    pub lang: String,
    pub tokens: Vec<u32>,
    pub text: String,
    /// Inline image as hex-encoded little-endian f32 values.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image: Option<String>,
}

impl CaptionRecord {
    pub fn from_plan(
        scene_id: u64,
        plan: &CaptionPlan,
        lang: &LanguageSpec,
        vocab: &Vocabulary,
    ) -> Result<Self> {
        let words = realize_plan(plan, lang);
        if words.len() > MAX_SEQ_LEN {
            return Err(Error::Format(format!(
                "caption longer than {MAX_SEQ_LEN} tokens"
            )));
        }
        let tokens = words.iter().map(|w| vocab.id(w)).collect::<Result<_>>()?;
        Ok(Self {
            scene_id,
            lang: lang.id.clone(),
            tokens,
            text: words.join(" "),
            image: None,
        })
    }

    /// Parses the caption back to its plan through the vocabulary and lexicon.
    pub fn plan(&self, lang: &LanguageSpec, vocab: &Vocabulary) -> Result<CaptionPlan> {
        let words = self
            .tokens
            .iter()
            .map(|&t| vocab.token(t))
            .collect::<Result<Vec<_>>>()?;
        parse_caption(&words, lang)
    }
}

pub fn realize_caption(
    scene: &Scene,
    lang: &LanguageSpec,
    vocab: &Vocabulary,
    style_seed: u64,
) -> Result<CaptionRecord> {
    CaptionRecord::from_plan(scene.id, &plan_caption(scene, style_seed), lang, vocab)
}

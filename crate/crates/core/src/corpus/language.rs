use std::collections::{HashMap, HashSet};

use serde::{Deserialize, Serialize};

use super::scene::{Color, Shape, Size};
use crate::error::{Error, Result};
use crate::rng::SplitMix64;

pub const PAD: u32 = 0;
pub const MASK: u32 = 1;
pub const SPECIAL_TOKENS: [&str; 2] = ["<pad>", "<mask>"];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Relation {
    LeftOf,
    RightOf,
    Above,
    Below,
}

impl Relation {
    pub const ALL: [Relation; 4] = [
        Relation::LeftOf,
        Relation::RightOf,
        Relation::Above,
        Relation::Below,
    ];

    pub fn converse(self) -> Relation {
        match self {
            Relation::LeftOf => Relation::RightOf,
            Relation::RightOf => Relation::LeftOf,
            Relation::Above => Relation::Below,
            Relation::Below => Relation::Above,
        }
    }

    pub fn is_horizontal(self) -> bool {
        matches!(self, Relation::LeftOf | Relation::RightOf)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Concept {
    Shape(Shape),
    Color(Color),
    Size(Size),
    Rel(Relation),
    Article,
    And,
    ThereIs,
}

impl Concept {
    pub const COUNT: usize = 18;

    pub fn all() -> Vec<Concept> {
        let mut out = Vec::with_capacity(Self::COUNT);
        out.extend(Shape::ALL.map(Concept::Shape));
        out.extend(Color::ALL.map(Concept::Color));
        out.extend(Size::ALL.map(Concept::Size));
        out.extend(Relation::ALL.map(Concept::Rel));
        out.extend([Concept::Article, Concept::And, Concept::ThereIs]);
        out
    }

    pub fn index(self) -> usize {
        match self {
            Concept::Shape(s) => s as usize,
            Concept::Color(c) => 4 + c as usize,
            Concept::Size(s) => 9 + s as usize,
            Concept::Rel(r) => 11 + r as usize,
            Concept::Article => 15,
            Concept::And => 16,
            Concept::ThereIs => 17,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum WordOrder {
    /// `a small red circle left-of a cross`; frame word first.
    AdjNounSvo,
    /// `circle red small a cross a left-of`; frame word last.
    NounAdjSov,
    /// `left-of a circle red small a cross`; frame word first.
    Vso,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Morphology {
    Isolating,
    /// Color is suffixed onto the shape stem, giving one fused token.
    Agglutinative,
}

#[derive(Clone, Debug)]
pub struct LanguageSpec {
    pub id: String,
    pub order: WordOrder,
    pub morphology: Morphology,
    pub pretrain_seen: bool,
    lexicon: Vec<String>,
    /// Indexed by `color * 4 + shape`; empty for isolating languages.
    fused: Vec<String>,
    inverse: HashMap<String, Vec<Concept>>,
}

impl LanguageSpec {
    pub fn new(
        id: &str,
        order: WordOrder,
        morphology: Morphology,
        pretrain_seen: bool,
        lexicon: Vec<String>,
    ) -> Result<Self> {
        if lexicon.len() != Concept::COUNT {
            return Err(Error::InvalidDataset(format!(
                "lexicon for `{id}` has {} words, expected {}",
                lexicon.len(),
                Concept::COUNT
            )));
        }
        let mut fused = Vec::new();
        if morphology == Morphology::Agglutinative {
            for color in Color::ALL {
                for shape in Shape::ALL {
                    fused.push(format!(
                        "{}{}",
                        lexicon[Concept::Shape(shape).index()],
                        lexicon[Concept::Color(color).index()]
                    ));
                }
            }
        }
        let mut inverse = HashMap::new();
        for c in Concept::all() {
            inverse.insert(lexicon[c.index()].clone(), vec![c]);
        }
        for color in Color::ALL {
            for shape in Shape::ALL {
                if let Some(w) = fused.get(color as usize * 4 + shape as usize) {
                    inverse.insert(w.clone(), vec![Concept::Shape(shape), Concept::Color(color)]);
                }
            }
        }
        if inverse.len() != Concept::COUNT + fused.len() {
            return Err(Error::InvalidDataset(format!(
                "lexicon for `{id}` is not a bijection"
            )));
        }
        Ok(Self {
            id: id.to_string(),
            order,
            morphology,
            pretrain_seen,
            lexicon,
            fused,
            inverse,
        })
    }

    pub fn word(&self, c: Concept) -> &str {
        &self.lexicon[c.index()]
    }

    pub fn fused_word(&self, color: Color, shape: Shape) -> Option<&str> {
        self.fused
            .get(color as usize * 4 + shape as usize)
            .map(String::as_str)
    }

    /// Concepts expressed by a surface token, or `None` if it is not a word
    /// of this language.
    pub fn decode(&self, token: &str) -> Option<&[Concept]> {
        self.inverse.get(token).map(Vec::as_slice)
    }

    /// Every surface token of the language, base words first.
    pub fn tokens(&self) -> impl Iterator<Item = &str> {
        self.lexicon
            .iter()
            .chain(self.fused.iter())
            .map(String::as_str)
    }
}

const ENGLISH: [&str; Concept::COUNT] = [
    "circle", "square", "triangle", "cross", "red", "green", "blue", "yellow", "white", "small",
    "large", "left-of", "right-of", "above", "below", "a", "and", "there-is",
];

struct Phonology {
    onsets: &'static [&'static str],
    vowels: &'static [&'static str],
    codas: &'static [&'static str],
}

fn synth_lexicon(tag: u64, ph: &Phonology, taken: &mut HashSet<String>) -> Vec<String> {
    let mut rng = SplitMix64::derive(0x1E71C0, &[tag]);
    let mut out = Vec::with_capacity(Concept::COUNT);
    while out.len() < Concept::COUNT {
        let syllables = 2 + rng.below_usize(2);
        let mut w = String::new();
        for _ in 0..syllables {
            w.push_str(ph.onsets[rng.below_usize(ph.onsets.len())]);
            w.push_str(ph.vowels[rng.below_usize(ph.vowels.len())]);
        }
        if !ph.codas.is_empty() && rng.bernoulli(0.4) {
            w.push_str(ph.codas[rng.below_usize(ph.codas.len())]);
        }
        if taken.insert(w.clone()) {
            out.push(w);
        }
    }
    out
}

/// The default seven-language roster: four pretraining languages, one
/// unseen target language, and two languages held out of every training
/// stage. Lexicons depend only on fixed internal seeds, never on the run seed.
pub fn default_languages() -> Vec<LanguageSpec> {
    let mut taken: HashSet<String> = ENGLISH.iter().map(|s| s.to_string()).collect();
    let phon = [
        Phonology {
            onsets: &["b", "d", "l", "m", "n", "p", "r", "s", "t", "c"],
            vowels: &["a", "e", "i", "o", "u"],
            codas: &["s", "n", "r"],
        },
        Phonology {
            onsets: &["k", "s", "t", "n", "h", "m", "r", "y", "w", "g"],
            vowels: &["a", "i", "u", "e", "o"],
            codas: &["n"],
        },
        Phonology {
            onsets: &["bh", "dh", "g", "j", "k", "p", "r", "s", "v", "ch"],
            vowels: &["a", "aa", "i", "ee", "u"],
            codas: &["m", "n", "l"],
        },
        Phonology {
            onsets: &["ch", "k", "ll", "m", "n", "p", "q", "s", "t", "w", "y"],
            vowels: &["a", "i", "u"],
            codas: &["q", "y"],
        },
        Phonology {
            onsets: &["z", "v", "x", "f", "zh", "kv"],
            vowels: &["ae", "oi", "y", "e"],
            codas: &["x", "th"],
        },
        Phonology {
            onsets: &["gw", "nd", "mb", "ts", "l", "h"],
            vowels: &["o", "uu", "ei", "a"],
            codas: &["ng"],
        },
    ];
    let mut lex: Vec<Vec<String>> = phon
        .iter()
        .enumerate()
        .map(|(i, ph)| synth_lexicon(i as u64, ph, &mut taken))
        .collect();
    let mut take = || lex.remove(0);
    let english = ENGLISH.iter().map(|s| s.to_string()).collect();
    use Morphology::*;
    use WordOrder::*;
    let specs = [
        ("en", AdjNounSvo, Isolating, true, english),
        ("es", NounAdjSov, Isolating, true, take()),
        ("ja", NounAdjSov, Isolating, true, take()),
        ("hi", AdjNounSvo, Isolating, true, take()),
        ("qu", Vso, Agglutinative, false, take()),
        ("x1", Vso, Isolating, false, take()),
        ("x2", AdjNounSvo, Isolating, false, take()),
    ];
    specs
        .into_iter()
        .map(|(id, o, m, seen, words)| {
            LanguageSpec::new(id, o, m, seen, words).expect("built-in lexicons are bijective")
        })
        .collect()
}

/// Word-level vocabulary over the union of all languages plus `<pad>` and
/// `<mask>` at ids 0 and 1.
#[derive(Clone, Debug)]
pub struct Vocabulary {
    tokens: Vec<String>,
    owner: Vec<Option<usize>>,
    index: HashMap<String, u32>,
}

impl Vocabulary {
    pub fn new(langs: &[LanguageSpec]) -> Result<Self> {
        let mut v = Self {
            tokens: Vec::new(),
            owner: Vec::new(),
            index: HashMap::new(),
        };
        for s in SPECIAL_TOKENS {
            v.push(s, None)?;
        }
        for (li, lang) in langs.iter().enumerate() {
            for tok in lang.tokens() {
                v.push(tok, Some(li))?;
            }
        }
        Ok(v)
    }

    fn push(&mut self, tok: &str, owner: Option<usize>) -> Result<()> {
        let id = self.tokens.len() as u32;
        if self.index.insert(tok.to_string(), id).is_some() {
            return Err(Error::InvalidDataset(format!(
                "token `{tok}` appears in two languages"
            )));
        }
        self.tokens.push(tok.to_string());
        self.owner.push(owner);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, tok: &str) -> Result<u32> {
        self.index
            .get(tok)
            .copied()
            .ok_or_else(|| Error::UnknownWord(tok.to_string()))
    }

    pub fn token(&self, id: u32) -> Result<&str> {
        self.tokens
            .get(id as usize)
            .map(String::as_str)
            .ok_or(Error::UnknownToken(id as usize))
    }

    /// Index (into the roster used to build the vocabulary) of the language
    /// owning a token; `None` for special tokens.
    pub fn owner(&self, id: u32) -> Option<usize> {
        self.owner.get(id as usize).copied().flatten()
    }
}

/// A language roster together with its shared vocabulary.
#[derive(Clone, Debug)]
pub struct Languages {
    pub specs: Vec<LanguageSpec>,
    pub vocab: Vocabulary,
}

impl Languages {
    pub fn new(specs: Vec<LanguageSpec>) -> Result<Self> {
        let vocab = Vocabulary::new(&specs)?;
        Ok(Self { specs, vocab })
    }

    pub fn default_roster() -> Self {
        Self::new(default_languages()).expect("default roster is disjoint")
    }

    pub fn get(&self, id: &str) -> Result<&LanguageSpec> {
        self.specs
            .iter()
            .find(|l| l.id == id)
            .ok_or_else(|| Error::UnknownLanguage(id.to_string()))
    }

    pub fn position(&self, id: &str) -> Result<usize> {
        self.specs
            .iter()
            .position(|l| l.id == id)
            .ok_or_else(|| Error::UnknownLanguage(id.to_string()))
    }

    /// The pivot language: the first language of the roster.
    pub fn pivot(&self) -> &LanguageSpec {
        &self.specs[0]
    }

    pub fn ids(&self) -> Vec<String> {
        self.specs.iter().map(|l| l.id.clone()).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lexicons_are_disjoint() {
        let langs = default_languages();
        for (i, a) in langs.iter().enumerate() {
            let sa: HashSet<&str> = a.tokens().collect();
            for b in &langs[i + 1..] {
                let sb: HashSet<&str> = b.tokens().collect();
                assert!(sa.is_disjoint(&sb), "{} vs {}", a.id, b.id);
            }
        }
    }

    #[test]
    fn lexicon_inverts() {
        for lang in default_languages() {
            for c in Concept::all() {
                assert_eq!(lang.decode(lang.word(c)), Some(&[c][..]));
            }
        }
    }

    #[test]
    fn concept_indices_are_dense() {
        let all = Concept::all();
        assert_eq!(all.len(), Concept::COUNT);
        for (i, c) in all.iter().enumerate() {
            assert_eq!(c.index(), i);
        }
    }

    #[test]
    fn unseen_language_is_typologically_distinct() {
        let langs = default_languages();
        let qu = langs.iter().find(|l| l.id == "qu").unwrap();
        assert!(!qu.pretrain_seen);
        assert_eq!(qu.morphology, Morphology::Agglutinative);
        for seen in langs.iter().filter(|l| l.pretrain_seen) {
            assert_ne!(seen.order, qu.order);
            assert_eq!(seen.morphology, Morphology::Isolating);
        }
    }

    #[test]
    fn vocabulary_round_trips() {
        let langs = Languages::default_roster();
        let v = &langs.vocab;
        assert_eq!(v.token(PAD).unwrap(), "<pad>");
        assert_eq!(v.token(MASK).unwrap(), "<mask>");
        for id in 0..v.len() as u32 {
            assert_eq!(v.id(v.token(id).unwrap()).unwrap(), id);
        }
        assert_eq!(v.len(), 2 + 7 * Concept::COUNT + 20);
    }
}

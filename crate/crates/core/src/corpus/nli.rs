use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::caption::{CaptionPlan, CaptionRecord, NounPhrase};
use super::dataset::{scene_id, Domain};
use super::language::{Languages, Relation};
use super::scene::{generate_scene, Color, Scene, Shape, Size};
use crate::error::{Error, Result};
use crate::rng::SplitMix64;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NliLabel {
    Entailment = 0,
    Neutral = 1,
    Contradiction = 2,
}

impl NliLabel {
    pub const ALL: [NliLabel; 3] = [
        NliLabel::Entailment,
        NliLabel::Neutral,
        NliLabel::Contradiction,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Result<Self> {
        Self::ALL.get(i).copied().ok_or(Error::BadLabel(i))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NliSplit {
    TrainEn,
    DevEn,
    TestMulti,
}

impl NliSplit {
    pub fn name(self) -> &'static str {
        match self {
            NliSplit::TrainEn => "train_en",
            NliSplit::DevEn => "dev_en",
            NliSplit::TestMulti => "test_multi",
        }
    }
}

impl fmt::Display for NliSplit {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for NliSplit {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        [NliSplit::TrainEn, NliSplit::DevEn, NliSplit::TestMulti]
            .into_iter()
            .find(|x| x.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown NLI split `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NliRecord {
    pub id: u64,
    pub lang: String,
    pub premise: CaptionRecord,
    pub hypothesis: CaptionRecord,
    pub label: NliLabel,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Truth {
    True,
    False,
    Unknown,
}

fn all_of(parts: impl IntoIterator<Item = Truth>) -> Truth {
    let mut out = Truth::True;
    for p in parts {
        match p {
            Truth::False => return Truth::False,
            Truth::Unknown => out = Truth::Unknown,
            Truth::True => {}
        }
    }
    out
}

fn attr<A: PartialEq>(claimed: Option<A>, known: Option<A>) -> Truth {
    match (claimed, known) {
        (None, _) => Truth::True,
        (Some(_), None) => Truth::Unknown,
        (Some(c), Some(k)) if c == k => Truth::True,
        _ => Truth::False,
    }
}

fn np_truth(h: &NounPhrase, premise: &[NounPhrase]) -> Truth {
    match premise.iter().find(|p| p.shape == h.shape) {
        None => Truth::Unknown,
        Some(p) => all_of([attr(h.color, p.color), attr(h.size, p.size)]),
    }
}

/// `(horizontal, lesser shape, greater shape)` along the relation's axis.
fn ordered(a: Shape, rel: Relation, b: Shape) -> (bool, Shape, Shape) {
    match rel {
        Relation::LeftOf => (true, a, b),
        Relation::RightOf => (true, b, a),
        Relation::Above => (false, a, b),
        Relation::Below => (false, b, a),
    }
}

/// Label for a hypothesis given a premise, assuming worlds in which no shape
/// occurs twice. Premise facts are the stated attributes of its objects and
/// at most one relation; anything else about the world is open.
pub fn infer_label(premise: &CaptionPlan, hypothesis: &CaptionPlan) -> NliLabel {
    let pnps = premise.noun_phrases();
    let mut parts: Vec<Truth> = hypothesis
        .noun_phrases()
        .iter()
        .map(|h| np_truth(h, &pnps))
        .collect();
    if let CaptionPlan::Related { a, rel, b } = hypothesis {
        let t = match premise {
            CaptionPlan::Related {
                a: pa,
                rel: prel,
                b: pb,
            } => {
                let h = ordered(a.shape, *rel, b.shape);
                let p = ordered(pa.shape, *prel, pb.shape);
                if h.0 != p.0 || [h.1, h.2] != [p.1, p.2] && [h.2, h.1] != [p.1, p.2] {
                    Truth::Unknown
                } else if h == p {
                    Truth::True
                } else {
                    Truth::False
                }
            }
            _ => Truth::Unknown,
        };
        parts.push(t);
    }
    match all_of(parts) {
        Truth::True => NliLabel::Entailment,
        Truth::False => NliLabel::Contradiction,
        Truth::Unknown => NliLabel::Neutral,
    }
}

fn pick<T: Copy>(rng: &mut SplitMix64, xs: &[T]) -> T {
    xs[rng.below_usize(xs.len())]
}

fn other<T: Copy + PartialEq>(rng: &mut SplitMix64, all: &[T], not: T) -> T {
    let rest: Vec<T> = all.iter().copied().filter(|&x| x != not).collect();
    pick(rng, &rest)
}

/// A weaker description of a premise noun phrase.
fn sub(rng: &mut SplitMix64, np: &NounPhrase) -> NounPhrase {
    NounPhrase {
        shape: np.shape,
        color: np.color.filter(|_| rng.bernoulli(0.5)),
        size: np.size.filter(|_| rng.bernoulli(0.5)),
    }
}

fn fresh(rng: &mut SplitMix64, shape: Shape) -> NounPhrase {
    NounPhrase {
        shape,
        color: rng.bernoulli(0.5).then(|| pick(rng, &Color::ALL)),
        size: rng.bernoulli(0.5).then(|| pick(rng, &Size::ALL)),
    }
}

fn fresh_from(rng: &mut SplitMix64, shapes: &[Shape]) -> NounPhrase {
    let s = pick(rng, shapes);
    fresh(rng, s)
}

fn orthogonal(rng: &mut SplitMix64, rel: Relation) -> Relation {
    if rel.is_horizontal() {
        pick(rng, &[Relation::Above, Relation::Below])
    } else {
        pick(rng, &[Relation::LeftOf, Relation::RightOf])
    }
}

fn propose(
    rng: &mut SplitMix64,
    label: NliLabel,
    a: &NounPhrase,
    rel: Relation,
    b: &NounPhrase,
) -> CaptionPlan {
    let frame = rng.bernoulli(0.5);
    let (x, y) = if rng.bernoulli(0.5) { (a, b) } else { (b, a) };
    let unused: Vec<Shape> = Shape::ALL
        .into_iter()
        .filter(|s| *s != a.shape && *s != b.shape)
        .collect();
    match label {
        NliLabel::Entailment => match rng.below(3) {
            0 => CaptionPlan::Exists {
                frame,
                np: sub(rng, x),
            },
            1 if rng.bernoulli(0.5) => CaptionPlan::Related {
                a: sub(rng, a),
                rel,
                b: sub(rng, b),
            },
            1 => CaptionPlan::Related {
                a: sub(rng, b),
                rel: rel.converse(),
                b: sub(rng, a),
            },
            _ => CaptionPlan::Both {
                frame,
                a: sub(rng, x),
                b: sub(rng, y),
            },
        },
        NliLabel::Contradiction => match rng.below(3) {
            0 | 1 => {
                let mut np = sub(rng, x);
                let flip_size = x.size.is_some() && rng.bernoulli(0.5);
                if flip_size {
                    np.size = x.size.map(Size::flip);
                } else {
                    np.color = Some(other(rng, &Color::ALL, x.color.unwrap_or(Color::Red)));
                }
                if rng.bernoulli(0.5) {
                    CaptionPlan::Exists { frame, np }
                } else {
                    CaptionPlan::Both {
                        frame,
                        a: np,
                        b: sub(rng, y),
                    }
                }
            }
            _ if rng.bernoulli(0.5) => CaptionPlan::Related {
                a: sub(rng, a),
                rel: rel.converse(),
                b: sub(rng, b),
            },
            _ => CaptionPlan::Related {
                a: sub(rng, b),
                rel,
                b: sub(rng, a),
            },
        },
        NliLabel::Neutral => match rng.below(5) {
            0 => CaptionPlan::Exists {
                frame,
                np: fresh_from(rng, &unused),
            },
            1 if x.size.is_none() => CaptionPlan::Exists {
                frame,
                np: NounPhrase {
                    shape: x.shape,
                    color: x.color.filter(|_| rng.bernoulli(0.5)),
                    size: Some(pick(rng, &Size::ALL)),
                },
            },
            1 | 2 => CaptionPlan::Related {
                a: sub(rng, x),
                rel: orthogonal(rng, rel),
                b: sub(rng, y),
            },
            3 => {
                let s1 = pick(rng, &unused);
                let s2 = if rng.bernoulli(0.5) {
                    other(rng, &unused, s1)
                } else {
                    x.shape
                };
                CaptionPlan::Related {
                    a: fresh(rng, s1),
                    rel: pick(rng, &Relation::ALL),
                    b: NounPhrase {
                        shape: s2,
                        color: None,
                        size: None,
                    },
                }
            }
            _ => CaptionPlan::Both {
                frame,
                a: sub(rng, x),
                b: fresh_from(rng, &unused),
            },
        },
    }
}

fn nli_scene(seed: u64, split: NliSplit, i: u64) -> Scene {
    for k in 0..256u64 {
        let index = ((split as u64) << 34) | (i << 8) | k;
        let s = generate_scene(scene_id(Domain::Nli, seed, index));
        if s.objects.len() >= 2 && s.has_distinct_shapes() {
            return s;
        }
    }
    unreachable!("256 consecutive scenes without two distinct shapes")
}

/// One premise/hypothesis pair with its label, before realization.
pub fn nli_item(seed: u64, split: NliSplit, i: u64) -> (Scene, CaptionPlan, CaptionPlan, NliLabel) {
    let label = NliLabel::ALL[(i % 3) as usize];
    let scene = nli_scene(seed, split, i);
    let mut rng = SplitMix64::derive(seed, &[0x1171, split as u64, i]);
    let n = scene.objects.len();
    let ia = rng.below_usize(n);
    let ib = (ia + 1 + rng.below_usize(n - 1)) % n;
    let (oa, ob) = (&scene.objects[ia], &scene.objects[ib]);
    let a = NounPhrase::of(oa, true, rng.bernoulli(0.5));
    let b = NounPhrase::of(ob, true, rng.bernoulli(0.5));
    let mut rels = Vec::new();
    if oa.cell.1 != ob.cell.1 {
        rels.push(if oa.cell.1 < ob.cell.1 {
            Relation::LeftOf
        } else {
            Relation::RightOf
        });
    }
    if oa.cell.0 != ob.cell.0 {
        rels.push(if oa.cell.0 < ob.cell.0 {
            Relation::Above
        } else {
            Relation::Below
        });
    }
    let rel = pick(&mut rng, &rels);
    let premise = CaptionPlan::Related { a, rel, b };
    loop {
        let h = propose(&mut rng, label, &a, rel, &b);
        if infer_label(&premise, &h) == label {
            return (scene, premise, h, label);
        }
    }
}

/// NLI records. Training and development splits are always in the pivot
/// language; the test split realizes the same pairs in every requested
/// language. Labels cycle through the three classes by record index.
pub fn build_nli_dataset(
    n: usize,
    langs: &[String],
    split: NliSplit,
    seed: u64,
    roster: &Languages,
) -> Result<Vec<NliRecord>> {
    let specs = match split {
        NliSplit::TestMulti => langs
            .iter()
            .map(|l| roster.get(l))
            .collect::<Result<Vec<_>>>()?,
        _ => vec![roster.pivot()],
    };
    let items: Vec<_> = (0..n as u64).map(|i| nli_item(seed, split, i)).collect();
    let mut out = Vec::with_capacity(n * specs.len());
    for spec in specs {
        for (i, (scene, p, h, label)) in items.iter().enumerate() {
            out.push(NliRecord {
                id: i as u64,
                lang: spec.id.clone(),
                premise: CaptionRecord::from_plan(scene.id, p, spec, &roster.vocab)?,
                hypothesis: CaptionRecord::from_plan(scene.id, h, spec, &roster.vocab)?,
                label: *label,
            });
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::scene::SceneObject;

    const GRID: u8 = 4;

    /// A world: at most one object per shape, each with color, size and cell.
    type World = Vec<(Shape, Color, Size, (u8, u8))>;

    fn fits(np: &NounPhrase, o: &(Shape, Color, Size, (u8, u8))) -> bool {
        o.0 == np.shape && np.color.map_or(true, |c| c == o.1) && np.size.map_or(true, |s| s == o.2)
    }

    fn holds(plan: &CaptionPlan, w: &World) -> bool {
        let exists = |np: &NounPhrase| w.iter().any(|o| fits(np, o));
        match plan {
            CaptionPlan::Exists { np, .. } => exists(np),
            CaptionPlan::Both { a, b, .. } => exists(a) && exists(b),
            CaptionPlan::Related { a, rel, b } => w.iter().any(|x| {
                fits(a, x)
                    && w.iter().any(|y| {
                        fits(b, y)
                            && match rel {
                                Relation::LeftOf => x.3 .1 < y.3 .1,
                                Relation::RightOf => x.3 .1 > y.3 .1,
                                Relation::Above => x.3 .0 < y.3 .0,
                                Relation::Below => x.3 .0 > y.3 .0,
                            }
                    })
            }),
        }
    }

    /// Brute force over every world built from the mentioned shapes: premise
    /// shapes are present, other mentioned shapes may be absent. Colors and
    /// sizes range over the mentioned values plus one unmentioned stand-in.
    fn oracle(premise: &CaptionPlan, hyp: &CaptionPlan) -> NliLabel {
        let pshapes: Vec<Shape> = premise.noun_phrases().iter().map(|n| n.shape).collect();
        let mut hshapes: Vec<Shape> = hyp
            .noun_phrases()
            .iter()
            .map(|n| n.shape)
            .filter(|s| !pshapes.contains(s))
            .collect();
        hshapes.sort();
        hshapes.dedup();
        let nps: Vec<NounPhrase> = premise
            .noun_phrases()
            .into_iter()
            .chain(hyp.noun_phrases())
            .collect();
        let colors = |s: Shape| {
            let mut v: Vec<Color> = nps
                .iter()
                .filter(|n| n.shape == s)
                .filter_map(|n| n.color)
                .collect();
            let spare = Color::ALL.into_iter().find(|c| !v.contains(c)).unwrap();
            v.push(spare);
            v.sort();
            v.dedup();
            v
        };
        let (mut sat, mut unsat) = (false, false);
        for mask in 0..(1u32 << hshapes.len()) {
            let mut shapes = pshapes.clone();
            shapes.extend(
                hshapes
                    .iter()
                    .enumerate()
                    .filter(|(i, _)| mask & (1 << i) != 0)
                    .map(|(_, s)| *s),
            );
            let mut world = Vec::new();
            search(&shapes, &colors, &mut world, premise, hyp, &mut sat, &mut unsat);
            if sat && unsat {
                return NliLabel::Neutral;
            }
        }
        match (sat, unsat) {
            (true, false) => NliLabel::Entailment,
            (false, true) => NliLabel::Contradiction,
            _ => panic!("premise unsatisfiable"),
        }
    }

    fn search(
        shapes: &[Shape],
        colors: &dyn Fn(Shape) -> Vec<Color>,
        world: &mut World,
        premise: &CaptionPlan,
        hyp: &CaptionPlan,
        sat: &mut bool,
        unsat: &mut bool,
    ) {
        if *sat && *unsat {
            return;
        }
        if world.len() == shapes.len() {
            if holds(premise, world) {
                if holds(hyp, world) {
                    *sat = true;
                } else {
                    *unsat = true;
                }
            }
            return;
        }
        let s = shapes[world.len()];
        for c in colors(s) {
            for z in Size::ALL {
                for r in 0..GRID {
                    for col in 0..GRID {
                        if world.iter().any(|o| o.3 == (r, col)) {
                            continue;
                        }
                        world.push((s, c, z, (r, col)));
                        search(shapes, colors, world, premise, hyp, sat, unsat);
                        world.pop();
                    }
                }
            }
        }
    }

    fn np(shape: Shape, color: Option<Color>, size: Option<Size>) -> NounPhrase {
        NounPhrase { shape, color, size }
    }

    fn spec_premise() -> CaptionPlan {
        CaptionPlan::Related {
            a: np(Shape::Circle, Some(Color::Red), None),
            rel: Relation::LeftOf,
            b: np(Shape::Square, Some(Color::Blue), None),
        }
    }

    #[test]
    fn spec_examples() {
        let p = spec_premise();
        let red_circle = CaptionPlan::Exists {
            frame: false,
            np: np(Shape::Circle, Some(Color::Red), None),
        };
        let green_circle = CaptionPlan::Exists {
            frame: false,
            np: np(Shape::Circle, Some(Color::Green), None),
        };
        let tri = CaptionPlan::Related {
            a: np(Shape::Triangle, None, Some(Size::Small)),
            rel: Relation::Above,
            b: np(Shape::Cross, None, None),
        };
        for (h, want) in [
            (red_circle, NliLabel::Entailment),
            (green_circle, NliLabel::Contradiction),
            (tri, NliLabel::Neutral),
        ] {
            assert_eq!(infer_label(&p, &h), want);
            assert_eq!(oracle(&p, &h), want);
        }
    }

    #[test]
    fn rules_agree_with_brute_force_on_generated_records() {
        for split in [NliSplit::TrainEn, NliSplit::TestMulti] {
            for i in 0..240u64 {
                let (scene, p, h, label) = nli_item(11, split, i);
                assert_eq!(oracle(&p, &h), label, "{split} {i}: {p:?} / {h:?}");
                let w: World = scene
                    .objects
                    .iter()
                    .map(|o: &SceneObject| (o.shape, o.color, o.size, o.cell))
                    .collect();
                assert!(holds(&p, &w));
                match label {
                    NliLabel::Entailment => assert!(holds(&h, &w)),
                    NliLabel::Contradiction => assert!(!holds(&h, &w)),
                    NliLabel::Neutral => {}
                }
            }
        }
    }

    #[test]
    fn labels_are_balanced_and_parallel() {
        let roster = Languages::default_roster();
        let langs = roster.ids();
        let train = build_nli_dataset(100, &langs, NliSplit::TrainEn, 0, &roster).unwrap();
        assert_eq!(train.len(), 100);
        assert!(train.iter().all(|r| r.lang == "en"));
        for l in NliLabel::ALL {
            let c = train.iter().filter(|r| r.label == l).count();
            assert!((33..=34).contains(&c));
        }
        let test = build_nli_dataset(30, &langs, NliSplit::TestMulti, 0, &roster).unwrap();
        assert_eq!(test.len(), 30 * 7);
        for r in &test {
            let en = &test[r.id as usize];
            assert_eq!(en.label, r.label);
            let lang = roster.get(&r.lang).unwrap();
            let pivot = roster.pivot();
            assert_eq!(
                r.hypothesis.plan(lang, &roster.vocab).unwrap(),
                en.hypothesis.plan(pivot, &roster.vocab).unwrap()
            );
        }
        let dev = build_nli_dataset(30, &langs, NliSplit::DevEn, 0, &roster).unwrap();
        assert!(dev.iter().all(|d| train.iter().all(|t| t.premise.scene_id != d.premise.scene_id)));
    }

    #[test]
    fn generator_is_deterministic() {
        assert_eq!(nli_item(3, NliSplit::DevEn, 17), nli_item(3, NliSplit::DevEn, 17));
    }
}

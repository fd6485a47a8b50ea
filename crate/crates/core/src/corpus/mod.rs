//! Synthetic shapes world: scenes, rendered images, toy languages, parallel
//! captions, alignment datasets, the parallel evaluation set and NLI pairs.

mod caption;
mod dataset;
pub mod io;
mod language;
mod nli;
mod scene;

pub use caption::{
    parse_caption, plan_caption, plan_concepts, realize_caption, realize_plan, CaptionPlan,
    CaptionRecord, NounPhrase, MAX_SEQ_LEN,
};
pub use dataset::{
    build_alignment_dataset, build_parallel_eval_set, build_pretraining_corpus, domain_of, code_switch,
    scene_id, AlignmentDataset, AlignmentItem, BudgetMode, Domain, ParallelEvalSet, Variant,
};
pub use language::{
    default_languages, Concept, LanguageSpec, Languages, Morphology, Relation, Vocabulary,
    WordOrder, MASK, PAD, SPECIAL_TOKENS,
};
pub use nli::{build_nli_dataset, infer_label, nli_item, NliLabel, NliRecord, NliSplit};
pub use scene::{
    generate_biased_scene, generate_scene, render_image, Cell, Color, Predicate, Scene, SceneObject, Shape, Size,
    SpatialRelation, CHANNELS, GRID, IMAGE_SIZE,
};

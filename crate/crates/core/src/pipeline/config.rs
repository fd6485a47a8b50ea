//! Flat `key = value` run configuration. Blank lines and `#` comments are
//! ignored; every key must appear in the schema and at most once.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use crate::align::TrainSchedule;
use crate::corpus::{BudgetMode, Languages};
use crate::encoders::{EncoderConfig, MlmConfig};
use crate::error::{Error, Result};
use crate::eval::{NliProbeConfig, TsneConfig};
use crate::rng::SplitMix64;

/// Comma-separated identifiers.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct List(pub Vec<String>);

impl FromStr for List {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        let items: Vec<String> = s.split(',').map(|x| x.trim().to_string()).collect();
        if items.iter().any(|x| x.is_empty()) {
            return Err("empty list element".into());
        }
        Ok(List(items))
    }
}

impl fmt::Display for List {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0.join(","))
    }
}

/// A step count or `auto`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Auto(pub Option<usize>);

impl FromStr for Auto {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "auto" => Ok(Auto(None)),
            _ => s.parse().map(|n| Auto(Some(n))).map_err(|e| format!("{e}")),
        }
    }
}

impl fmt::Display for Auto {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.0 {
            Some(n) => write!(f, "{n}"),
            None => f.write_str("auto"),
        }
    }
}

macro_rules! schema {
    ($($key:ident: $ty:ty = $default:expr, $doc:literal;)*) => {
        /// Every tunable of a run. Field names are the config keys.
        #[derive(Clone, Debug, PartialEq)]
        pub struct RunConfig {
            $(#[doc = $doc] pub $key: $ty,)*
        }

        impl Default for RunConfig {
            fn default() -> Self {
                Self { $($key: $default,)* }
            }
        }

        impl RunConfig {
            /// `(key, description)` for every accepted key.
            pub const SCHEMA: &'static [(&'static str, &'static str)] = &[$((stringify!($key), $doc),)*];

            pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
                match key {
                    $(stringify!($key) => {
                        self.$key = value.parse::<$ty>().map_err(|e| {
                            Error::Config(format!("bad value `{value}` for `{key}`: {e}"))
                        })?;
                    })*
                    _ => return Err(Error::Config(format!("unknown key `{key}`"))),
                }
                Ok(())
            }

            pub fn entries(&self) -> Vec<(&'static str, String)> {
                vec![$((stringify!($key), self.$key.to_string()),)*]
            }
        }
    };
}

schema! {
    seed: u64 = 7, "Global seed; every stage derives its own stream from it.";
    variant: String = "multilingual".into(), "Variant for single-variant subcommands.";
    variants: List = List(["untuned", "eng_only", "eng_pivot", "multilingual", "multilingual_plus_unseen"].map(String::from).to_vec()), "Variants trained and evaluated by run-all.";
    budget: BudgetMode = BudgetMode::FixedTotal, "fixed_total or fixed_per_language.";
    symmetric: bool = true, "Average both contrastive directions.";
    finetune_languages: List = List(["en", "es", "ja", "hi"].map(String::from).to_vec()), "Alignment languages, pivot first.";
    unseen_language: String = "qu".into(), "Pretraining-unseen language added by the plus-unseen variant.";
    d_model: usize = 64, "Encoder width.";
    layers: usize = 2, "Transformer blocks per encoder.";
    heads: usize = 4, "Attention heads.";
    ff: usize = 128, "Feed-forward width.";
    proj_dim: usize = 64, "Shared embedding width.";
    pretrain_sentences: usize = 2000, "Pretraining sentences per seen language.";
    world_bias: f64 = 0.7, "Attribute co-occurrence strength of the scenes behind pretraining text.";
    code_switch: f64 = 0.3, "Fraction of pretraining records with dictionary code-switching between seen languages.";
    mlm_epochs: usize = 4, "Masked-LM epochs.";
    mlm_batch_size: usize = 64, "Masked-LM batch size.";
    mlm_lr: f64 = 1e-3, "Masked-LM learning rate.";
    mask_prob: f64 = 0.15, "Masking probability.";
    align_items: usize = 4000, "Alignment items under fixed_total.";
    epochs: usize = 10, "Alignment epochs.";
    batch_size: usize = 64, "Alignment batch size.";
    thaw_step: Auto = Auto(None), "Step at which encoders unfreeze; auto is half the first epoch.";
    max_steps: Auto = Auto(None), "Optional cap on alignment steps; auto means none.";
    lr_head: f64 = 1e-3, "Projection-head learning rate.";
    lr_encoder: f64 = 1e-3, "Text encoder learning rate after thawing. Higher than the library schedule default: unseen-language embeddings start untrained.";
    lr_vision: f64 = 1e-3, "Vision encoder learning rate after thawing.";
    lr_temperature: f64 = 1e-3, "Temperature learning rate.";
    eval_sentences: usize = 200, "Sentences per language in the parallel eval set.";
    nli_train: usize = 3000, "English NLI training pairs.";
    nli_dev: usize = 500, "English NLI dev pairs.";
    nli_test: usize = 600, "NLI test pairs per language.";
    probe_hidden: usize = 128, "Probe hidden width.";
    probe_lr: f64 = 1e-3, "Probe learning rate.";
    probe_batch_size: usize = 64, "Probe batch size.";
    probe_epochs: usize = 100, "Maximum probe epochs.";
    probe_patience: usize = 10, "Early-stopping patience in epochs.";
    tsne_sentences: usize = 100, "Eval sentences projected with t-SNE.";
    tsne_languages: List = List(["en", "es", "ja", "hi"].map(String::from).to_vec()), "Languages in the t-SNE plot and clique metric.";
    tsne_perplexity: f64 = 30.0, "t-SNE perplexity.";
    tsne_iterations: usize = 1000, "t-SNE iterations.";
}

/// Stream tags for per-stage seeds.
#[derive(Clone, Copy, Debug)]
pub enum Stage {
    Data = 1,
    Pretrain = 2,
    Align = 3,
    Probe = 4,
    Tsne = 5,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let mut seen = Vec::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", n + 1)))?;
            let (k, v) = (k.trim(), v.trim());
            if seen.contains(&k) {
                return Err(Error::Config(format!("line {}: duplicate key `{k}`", n + 1)));
            }
            seen.push(k);
            cfg.set(k, v)
                .map_err(|e| Error::Config(format!("line {}: {}", n + 1, strip(e))))?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingArtifact(path.to_path_buf()));
        }
        let text = fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        Self::parse(&text)
    }

    /// Canonical text with every key, defaults included.
    pub fn to_text(&self) -> String {
        self.entries()
            .into_iter()
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }

    /// Cross-field checks against the roster.
    pub fn validate(&self, roster: &Languages) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        self.encoder().validate().map_err(|e| Error::Config(strip(e)))?;
        for l in self.finetune_languages.0.iter().chain(&self.tsne_languages.0) {
            if roster.get(l).is_err() {
                return bad(format!("unknown language `{l}`"));
            }
        }
        if self.finetune_languages.0.first() != Some(&roster.pivot().id) {
            return bad(format!("finetune_languages must start with `{}`", roster.pivot().id));
        }
        match roster.get(&self.unseen_language) {
            Ok(s) if !s.pretrain_seen => {}
            _ => return bad(format!("`{}` is not a pretraining-unseen language", self.unseen_language)),
        }
        for v in self.variants.0.iter().chain(std::iter::once(&self.variant)) {
            if v != "untuned" && v.parse::<crate::corpus::Variant>().is_err() {
                return bad(format!("unknown variant `{v}`"));
            }
        }
        let positive = [
            ("proj_dim", self.proj_dim),
            ("pretrain_sentences", self.pretrain_sentences),
            ("mlm_epochs", self.mlm_epochs),
            ("mlm_batch_size", self.mlm_batch_size),
            ("align_items", self.align_items),
            ("epochs", self.epochs),
            ("batch_size", self.batch_size),
            ("nli_train", self.nli_train),
            ("nli_dev", self.nli_dev),
            ("nli_test", self.nli_test),
            ("probe_hidden", self.probe_hidden),
            ("probe_batch_size", self.probe_batch_size),
            ("probe_epochs", self.probe_epochs),
            ("tsne_iterations", self.tsne_iterations),
        ];
        if let Some((k, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return bad(format!("`{k}` must be positive"));
        }
        if self.eval_sentences < 2 {
            return bad("eval_sentences must be at least 2".into());
        }
        if self.tsne_sentences < 2 || self.tsne_sentences > self.eval_sentences {
            return bad("tsne_sentences must lie in 2..=eval_sentences".into());
        }
        let points = self.tsne_sentences * self.tsne_languages.0.len();
        if (points as f64) < 3.0 * self.tsne_perplexity || self.tsne_perplexity <= 0.0 {
            return bad(format!(
                "tsne_perplexity {} needs at least {} points, plot has {points}",
                self.tsne_perplexity,
                (3.0 * self.tsne_perplexity).ceil()
            ));
        }
        if self.align_items < self.batch_size {
            return bad("align_items must be at least batch_size".into());
        }
        for (k, v) in [("world_bias", self.world_bias), ("code_switch", self.code_switch)] {
            if !(0.0..=1.0).contains(&v) {
                return bad(format!("`{k}` must lie in [0, 1]"));
            }
        }
        if !(0.0..1.0).contains(&self.mask_prob) {
            return bad("mask_prob must lie in [0, 1)".into());
        }
        for (k, v) in [
            ("mlm_lr", self.mlm_lr),
            ("lr_head", self.lr_head),
            ("lr_encoder", self.lr_encoder),
            ("lr_vision", self.lr_vision),
            ("lr_temperature", self.lr_temperature),
            ("probe_lr", self.probe_lr),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("`{k}` must be a finite non-negative number"));
            }
        }
        Ok(())
    }

    pub fn stage_seed(&self, stage: Stage, tags: &[u64]) -> u64 {
        let mut all = vec![stage as u64];
        all.extend_from_slice(tags);
        SplitMix64::derive(self.seed, &all).next_u64()
    }

    pub fn encoder(&self) -> EncoderConfig {
        EncoderConfig {
            d_model: self.d_model,
            layers: self.layers,
            heads: self.heads,
            ff: self.ff,
            max_len: crate::corpus::MAX_SEQ_LEN,
        }
    }

    pub fn mlm(&self) -> MlmConfig {
        MlmConfig {
            epochs: self.mlm_epochs,
            batch_size: self.mlm_batch_size,
            lr: self.mlm_lr,
            mask_prob: self.mask_prob,
            seed: self.stage_seed(Stage::Pretrain, &[]),
        }
    }

    pub fn schedule(&self) -> TrainSchedule {
        TrainSchedule {
            epochs: self.epochs,
            batch_size: self.batch_size,
            thaw_step: self.thaw_step.0,
            lr_head: self.lr_head,
            lr_encoder: self.lr_encoder,
            lr_vision: self.lr_vision,
            lr_temperature: self.lr_temperature,
            symmetric: self.symmetric,
            max_steps: self.max_steps.0,
        }
    }

    pub fn probe(&self) -> NliProbeConfig {
        NliProbeConfig {
            hidden: self.probe_hidden,
            lr: self.probe_lr,
            batch_size: self.probe_batch_size,
            epochs: self.probe_epochs,
            patience: self.probe_patience,
            seed: self.stage_seed(Stage::Probe, &[]),
        }
    }

    pub fn tsne(&self) -> TsneConfig {
        TsneConfig {
            perplexity: self.tsne_perplexity,
            iterations: self.tsne_iterations,
            learning_rate: 200.0,
            seed: self.stage_seed(Stage::Tsne, &[]),
        }
    }
}

fn strip(e: Error) -> String {
    match e {
        Error::Config(m) => m,
        other => other.to_string(),
    }
}

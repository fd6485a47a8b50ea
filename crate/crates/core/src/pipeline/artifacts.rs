//! Subcommands as functions of an output directory. Each stage reads the
//! artifacts of earlier stages from disk, so stages can run as separate
//! processes; a missing input surfaces as [`Error::MissingArtifact`].
//!
//! Layout under the output directory:
//!
//! ```text
//! config.txt                      resolved configuration
//! data/pretrain.jsonl             pretraining text
//! data/align_<variant>.jsonl      alignment items
//! data/eval.jsonl                 parallel eval sentences, all languages
//! data/nli_{train,dev,test}.jsonl NLI splits
//! pretrain/text_model.xaln        pretrained text encoder
//! pretrain/mlm_loss.tsv
//! align/<encoder>.xaln            dual-encoder checkpoint
//! align/<encoder>_log.tsv         per-step training log
//! embeddings/<encoder>.embd       eval embeddings (+ .tsv sidecar)
//! retrieval/<encoder>.{tsv,json}
//! nli/<encoder>.{tsv,json}
//! tsne/<encoder>.svg, tsne/<encoder>_points.tsv, tsne/<encoder>.json
//! report/retrieval_summary.tsv, report/nli_summary.tsv, report/projection_summary.tsv
//! ```

use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::de::DeserializeOwned;
use serde::Serialize;

use super::config::RunConfig;
use super::experiment::{self as exp, EncoderKind, NliData};
use super::persist::{load_checkpoint, load_text_model, read_bytes, save_checkpoint, save_text_model};
use super::report::{
    projection_summary_tsv, layout_tsv, log_tsv, nli_rows, nli_tsv, retrieval_rows, retrieval_tsv, scatter_svg,
    retrieval_summary_tsv, nli_summary_tsv, ProjectionSummary, RetrievalRow,
};
use crate::corpus::io::{read_jsonl, write_jsonl};
use crate::corpus::{AlignmentDataset, CaptionRecord, Languages, ParallelEvalSet};
use crate::error::{Error, Result};
use crate::eval::{read_embd, write_embd, LanguageRoles, NliReport};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Command {
    GenData,
    Pretrain,
    Align,
    EvalRetrieval,
    EvalNli,
    Tsne,
    Report,
    RunAll,
}

impl Command {
    pub const ALL: [Command; 8] = [
        Command::GenData,
        Command::Pretrain,
        Command::Align,
        Command::EvalRetrieval,
        Command::EvalNli,
        Command::Tsne,
        Command::Report,
        Command::RunAll,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Command::GenData => "gen-data",
            Command::Pretrain => "pretrain",
            Command::Align => "align",
            Command::EvalRetrieval => "eval-retrieval",
            Command::EvalNli => "eval-nli",
            Command::Tsne => "tsne",
            Command::Report => "report",
            Command::RunAll => "run-all",
        }
    }
}

impl FromStr for Command {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Command::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown subcommand `{s}`")))
    }
}

/// Paths of every artifact under one output directory.
#[derive(Clone, Debug)]
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    fn at(&self, parts: &[&str]) -> PathBuf {
        parts.iter().fold(self.root.clone(), |p, x| p.join(x))
    }

    pub fn config(&self) -> PathBuf {
        self.at(&["config.txt"])
    }
    pub fn pretrain_data(&self) -> PathBuf {
        self.at(&["data", "pretrain.jsonl"])
    }
    pub fn align_data(&self, variant: &str) -> PathBuf {
        self.at(&["data", &format!("align_{variant}.jsonl")])
    }
    pub fn eval_data(&self) -> PathBuf {
        self.at(&["data", "eval.jsonl"])
    }
    pub fn nli_data(&self, split: &str) -> PathBuf {
        self.at(&["data", &format!("nli_{split}.jsonl")])
    }
    pub fn text_model(&self) -> PathBuf {
        self.at(&["pretrain", "text_model.xaln"])
    }
    pub fn mlm_loss(&self) -> PathBuf {
        self.at(&["pretrain", "mlm_loss.tsv"])
    }
    pub fn checkpoint(&self, enc: &str) -> PathBuf {
        self.at(&["align", &format!("{enc}.xaln")])
    }
    pub fn train_log(&self, enc: &str) -> PathBuf {
        self.at(&["align", &format!("{enc}_log.tsv")])
    }
    pub fn embeddings(&self, enc: &str) -> PathBuf {
        self.at(&["embeddings", &format!("{enc}.embd")])
    }
    pub fn retrieval(&self, enc: &str, ext: &str) -> PathBuf {
        self.at(&["retrieval", &format!("{enc}.{ext}")])
    }
    pub fn nli(&self, enc: &str, ext: &str) -> PathBuf {
        self.at(&["nli", &format!("{enc}.{ext}")])
    }
    pub fn svg(&self, enc: &str) -> PathBuf {
        self.at(&["tsne", &format!("{enc}.svg")])
    }
    pub fn points(&self, enc: &str) -> PathBuf {
        self.at(&["tsne", &format!("{enc}_points.tsv")])
    }
    pub fn projection(&self, enc: &str) -> PathBuf {
        self.at(&["tsne", &format!("{enc}.json")])
    }
    pub fn table(&self, name: &str) -> PathBuf {
        self.at(&["report", &format!("{name}.tsv")])
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path.display().to_string(), e))
}

fn write_records<T: Serialize>(path: &Path, records: &[T]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
    }
    write_jsonl(path, records)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    write_text(path, &s)
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let bytes = read_bytes(path)?;
    serde_json::from_slice(&bytes).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

/// Runs one subcommand. The resolved config is validated and copied into the
/// output directory first.
pub fn run(cmd: Command, cfg: &RunConfig, out: &Path) -> Result<()> {
    let roster = Languages::default_roster();
    cfg.validate(&roster)?;
    let lay = Layout::new(out);
    write_text(&lay.config(), &cfg.to_text())?;
    let single = || EncoderKind::parse(&cfg.variant);
    match cmd {
        Command::GenData => gen_data(cfg, &lay, &roster),
        Command::Pretrain => pretrain(cfg, &lay, &roster),
        Command::Align => align(cfg, &lay, single()?),
        Command::EvalRetrieval => eval_retrieval(cfg, &lay, &roster, single()?),
        Command::EvalNli => eval_nli(cfg, &lay, &roster, single()?),
        Command::Tsne => tsne(cfg, &lay, single()?),
        Command::Report => report(cfg, &lay),
        Command::RunAll => run_all(cfg, &lay, &roster),
    }
}

fn configured(cfg: &RunConfig) -> Result<Vec<EncoderKind>> {
    cfg.variants.0.iter().map(|v| EncoderKind::parse(v)).collect()
}

pub fn gen_data(cfg: &RunConfig, lay: &Layout, roster: &Languages) -> Result<()> {
    write_records(&lay.pretrain_data(), &exp::pretraining_corpus(cfg, roster)?)?;
    for kind in configured(cfg)? {
        if let EncoderKind::Aligned(v) = kind {
            write_records(&lay.align_data(v.name()), &exp::alignment_dataset(cfg, v, roster)?.items)?;
        }
    }
    let eval = exp::eval_set(cfg, roster)?;
    let flat: Vec<&CaptionRecord> = eval.records.iter().flatten().collect();
    write_records(&lay.eval_data(), &flat)?;
    let nli = exp::nli_data(cfg, roster)?;
    write_records(&lay.nli_data("train"), &nli.train)?;
    write_records(&lay.nli_data("dev"), &nli.dev)?;
    write_records(&lay.nli_data("test"), &nli.test)
}

pub fn pretrain(cfg: &RunConfig, lay: &Layout, roster: &Languages) -> Result<()> {
    let corpus: Vec<CaptionRecord> = read_jsonl(&lay.pretrain_data())?;
    let (model, losses) = exp::pretrain(cfg, &corpus, roster)?;
    save_text_model(&model, &lay.text_model())?;
    let mut s = String::from("epoch\tloss\n");
    for (i, l) in losses.iter().enumerate() {
        s.push_str(&format!("{}\t{l:.6}\n", i + 1));
    }
    write_text(&lay.mlm_loss(), &s)
}

pub fn align(cfg: &RunConfig, lay: &Layout, kind: EncoderKind) -> Result<()> {
    let pretrained = load_text_model(&lay.text_model())?;
    let dataset = match kind {
        EncoderKind::Untuned => None,
        EncoderKind::Aligned(v) => Some(AlignmentDataset {
            variant: v,
            budget: cfg.budget,
            items: read_jsonl(&lay.align_data(v.name()))?,
        }),
    };
    let (ck, log) = exp::align(cfg, kind, &pretrained, dataset.as_ref())?;
    save_checkpoint(&ck, &lay.checkpoint(kind.name()))?;
    write_text(&lay.train_log(kind.name()), &log_tsv(&log))
}

fn load_eval_set(lay: &Layout, roster: &Languages) -> Result<ParallelEvalSet> {
    let flat: Vec<CaptionRecord> = read_jsonl(&lay.eval_data())?;
    let langs = roster.ids();
    let mut records = vec![Vec::new(); langs.len()];
    for r in flat {
        let k = roster.position(&r.lang)?;
        records[k].push(r);
    }
    if records.iter().any(|r| r.len() != records[0].len()) {
        return Err(Error::Format("eval set languages differ in length".into()));
    }
    Ok(ParallelEvalSet { langs, records })
}

pub fn eval_retrieval(cfg: &RunConfig, lay: &Layout, roster: &Languages, kind: EncoderKind) -> Result<()> {
    let ck = load_checkpoint(&lay.checkpoint(kind.name()))?;
    let set = load_eval_set(lay, roster)?;
    let (report, mats) = exp::retrieval(cfg, &ck, &set, roster)?;
    let roles = LanguageRoles::from_roster(roster, &cfg.unseen_language)?;
    let rows = retrieval_rows(&report, &roles)?;
    let emb = lay.embeddings(kind.name());
    if let Some(dir) = emb.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
    }
    write_embd(&emb, &mats)?;
    write_text(&lay.retrieval(kind.name(), "tsv"), &retrieval_tsv(&rows))?;
    write_json(&lay.retrieval(kind.name(), "json"), &rows)
}

pub fn eval_nli(cfg: &RunConfig, lay: &Layout, roster: &Languages, kind: EncoderKind) -> Result<()> {
    let ck = load_checkpoint(&lay.checkpoint(kind.name()))?;
    let data = NliData {
        train: read_jsonl(&lay.nli_data("train"))?,
        dev: read_jsonl(&lay.nli_data("dev"))?,
        test: read_jsonl(&lay.nli_data("test"))?,
    };
    let report = exp::nli(cfg, &ck, &data, roster)?;
    write_text(&lay.nli(kind.name(), "tsv"), &nli_tsv(&nli_rows(&report)))?;
    write_json(&lay.nli(kind.name(), "json"), &report)
}

pub fn tsne(cfg: &RunConfig, lay: &Layout, kind: EncoderKind) -> Result<()> {
    let mats = read_embd(&lay.embeddings(kind.name()))?;
    let (layout, compactness) = exp::project(cfg, &mats)?;
    let svg = scatter_svg(&layout, &cfg.tsne_languages.0, kind.name())?;
    write_text(&lay.svg(kind.name()), &svg)?;
    write_text(&lay.points(kind.name()), &layout_tsv(&layout))?;
    write_json(
        &lay.projection(kind.name()),
        &ProjectionSummary {
            encoder: kind.name().into(),
            compactness,
            kl_after_exaggeration: layout.kl_after_exaggeration,
            kl: layout.kl,
        },
    )
}

/// Merges the per-encoder reports of every configured variant.
pub fn report(cfg: &RunConfig, lay: &Layout) -> Result<()> {
    let kinds = configured(cfg)?;
    let mut retrieval = Vec::new();
    let mut nli = Vec::new();
    let mut proj = Vec::new();
    for k in &kinds {
        retrieval.push(read_json::<Vec<RetrievalRow>>(&lay.retrieval(k.name(), "json"))?);
        nli.push(read_json::<NliReport>(&lay.nli(k.name(), "json"))?);
        proj.push(read_json::<ProjectionSummary>(&lay.projection(k.name()))?);
    }
    write_text(&lay.table("retrieval_summary"), &retrieval_summary_tsv(&retrieval, &cfg.unseen_language)?)?;
    write_text(&lay.table("nli_summary"), &nli_summary_tsv(&nli))?;
    write_text(&lay.table("projection_summary"), &projection_summary_tsv(&proj))
}

pub fn run_all(cfg: &RunConfig, lay: &Layout, roster: &Languages) -> Result<()> {
    gen_data(cfg, lay, roster)?;
    pretrain(cfg, lay, roster)?;
    for kind in configured(cfg)? {
        align(cfg, lay, kind)?;
        eval_retrieval(cfg, lay, roster, kind)?;
        eval_nli(cfg, lay, roster, kind)?;
        tsne(cfg, lay, kind)?;
    }
    report(cfg, lay)
}

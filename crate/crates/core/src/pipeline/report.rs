//! Report tables (TSV and JSON) and the scatter SVG.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::align::LogRow;
use crate::error::{Error, Result};
use crate::eval::{LanguageRoles, NliReport, RetrievalReport, TsneLayout};

/// Aggregate rows use this in the `lang` column.
pub const ALL_LANGS: &str = "*";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetrievalRow {
    /// `untuned` or `aligned`.
    pub encoder: String,
    pub variant: String,
    pub lang: String,
    pub subset: String,
    pub accuracy: f64,
}

fn encoder_class(name: &str) -> &'static str {
    if name == super::UNTUNED {
        "untuned"
    } else {
        "aligned"
    }
}

/// One row per evaluated language, tagged with its subset, followed by the
/// four aggregate rows.
pub fn retrieval_rows(report: &RetrievalReport, roles: &LanguageRoles) -> Result<Vec<RetrievalRow>> {
    let row = |lang: &str, subset: &str, accuracy: f64| RetrievalRow {
        encoder: encoder_class(&report.encoder).into(),
        variant: report.encoder.clone(),
        lang: lang.into(),
        subset: subset.into(),
        accuracy,
    };
    let mut rows = Vec::new();
    for (lang, acc) in &report.per_language {
        let subset = if roles.pretrain_seen.contains(lang) {
            "pretrain_seen"
        } else if roles.pretrain_unseen.contains(lang) {
            "pretrain_unseen"
        } else if roles.target_unseen == *lang {
            "target_unseen"
        } else {
            return Err(Error::UnknownLanguage(lang.clone()));
        };
        rows.push(row(lang, subset, *acc));
    }
    rows.push(row(ALL_LANGS, "all", report.all));
    rows.push(row(ALL_LANGS, "pretrain_seen", report.pretrain_seen));
    rows.push(row(ALL_LANGS, "pretrain_unseen", report.pretrain_unseen));
    rows.push(row(ALL_LANGS, "target_unseen", report.target_unseen));
    Ok(rows)
}

pub fn retrieval_tsv(rows: &[RetrievalRow]) -> String {
    let mut s = String::from("encoder\tvariant\tlang\tsubset\taccuracy\n");
    for r in rows {
        let _ = writeln!(s, "{}\t{}\t{}\t{}\t{:.6}", r.encoder, r.variant, r.lang, r.subset, r.accuracy);
    }
    s
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NliTableRow {
    pub encoder: String,
    pub lang: String,
    pub seen_in_finetune: bool,
    pub accuracy: f64,
}

pub fn nli_rows(report: &NliReport) -> Vec<NliTableRow> {
    report
        .rows
        .iter()
        .map(|r| NliTableRow {
            encoder: report.encoder.clone(),
            lang: r.lang.clone(),
            seen_in_finetune: r.seen_in_finetune,
            accuracy: r.accuracy,
        })
        .collect()
}

pub fn nli_tsv(rows: &[NliTableRow]) -> String {
    let mut s = String::from("encoder\tlang\tseen_in_finetune\taccuracy\n");
    for r in rows {
        let _ = writeln!(s, "{}\t{}\t{}\t{:.6}", r.encoder, r.lang, r.seen_in_finetune, r.accuracy);
    }
    s
}

pub fn log_tsv(log: &[LogRow]) -> String {
    let mut s = String::from("step\tloss\tt\tphase\n");
    for r in log {
        let _ = writeln!(s, "{}\t{:.6}\t{:.6}\t{}", r.step, r.loss, r.t, r.phase);
    }
    s
}

fn aggregate(rows: &[RetrievalRow], subset: &str) -> Result<f64> {
    rows.iter()
        .find(|r| r.lang == ALL_LANGS && r.subset == subset)
        .map(|r| r.accuracy)
        .ok_or_else(|| Error::Format(format!("retrieval report lacks the `{subset}` aggregate")))
}

/// One row per encoder with the aggregate retrieval accuracies, in the given
/// order. `unseen` names the target-unseen column.
pub fn retrieval_summary_tsv(reports: &[Vec<RetrievalRow>], unseen: &str) -> Result<String> {
    let mut s = format!("encoder\tall\tpretrain_seen\tpretrain_unseen\t{unseen}\n");
    for rows in reports {
        let name = rows
            .first()
            .map(|r| r.variant.clone())
            .ok_or_else(|| Error::Format("empty retrieval report".into()))?;
        let _ = writeln!(
            s,
            "{name}\t{:.6}\t{:.6}\t{:.6}\t{:.6}",
            aggregate(rows, "all")?,
            aggregate(rows, "pretrain_seen")?,
            aggregate(rows, "pretrain_unseen")?,
            aggregate(rows, "target_unseen")?
        );
    }
    Ok(s)
}

/// Encoders as rows, languages as columns, then the overall and
/// cross-lingual means.
pub fn nli_summary_tsv(reports: &[NliReport]) -> String {
    let langs: Vec<&str> = reports
        .first()
        .map(|r| r.rows.iter().map(|x| x.lang.as_str()).collect())
        .unwrap_or_default();
    let mut s = String::from("encoder");
    for l in &langs {
        s.push('\t');
        s.push_str(l);
    }
    s.push_str("\tmean\ttransfer_mean\n");
    for r in reports {
        s.push_str(&r.encoder);
        for l in &langs {
            match r.rows.iter().find(|x| x.lang == *l) {
                Some(x) => {
                    let _ = write!(s, "\t{:.6}", x.accuracy);
                }
                None => s.push_str("\tNA"),
            }
        }
        let _ = writeln!(s, "\t{:.6}\t{:.6}", r.mean, r.transfer_mean);
    }
    s
}

/// Projection summary of one encoder.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProjectionSummary {
    pub encoder: String,
    pub compactness: f64,
    pub kl_after_exaggeration: f64,
    pub kl: f64,
}

pub fn projection_summary_tsv(rows: &[ProjectionSummary]) -> String {
    let mut s = String::from("encoder\tclique_compactness\tkl_after_exaggeration\tkl\n");
    for r in rows {
        let _ = writeln!(
            s,
            "{}\t{:.6}\t{:.6}\t{:.6}",
            r.encoder, r.compactness, r.kl_after_exaggeration, r.kl
        );
    }
    s
}

pub fn layout_tsv(layout: &TsneLayout) -> String {
    let mut s = String::from("lang\tsentence_id\tx\ty\n");
    for p in &layout.points {
        let _ = writeln!(s, "{}\t{}\t{:.6}\t{:.6}", p.lang, p.sentence_id, p.x, p.y);
    }
    s
}

const PALETTE: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf",
];
const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 520.0;
const MARGIN: f64 = 30.0;
const LEGEND: f64 = 110.0;

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

/// Scatter plot of a layout. Every point is drawn in its language's color;
/// each translation clique over `clique_langs` is joined by all of its
/// pairwise segments.
pub fn scatter_svg(layout: &TsneLayout, clique_langs: &[String], title: &str) -> Result<String> {
    let mut langs: Vec<&str> = Vec::new();
    for p in &layout.points {
        if !langs.contains(&p.lang.as_str()) {
            langs.push(&p.lang);
        }
    }
    let mut cliques: BTreeMap<u64, Vec<Option<(f64, f64)>>> = BTreeMap::new();
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for p in &layout.points {
        x0 = x0.min(p.x);
        x1 = x1.max(p.x);
        y0 = y0.min(p.y);
        y1 = y1.max(p.y);
    }
    let span = (x1 - x0).max(y1 - y0).max(1e-12);
    let plot = (WIDTH - LEGEND - 2.0 * MARGIN).min(HEIGHT - 2.0 * MARGIN);
    let map = |x: f64, y: f64| {
        (
            MARGIN + (x - x0) / span * plot,
            MARGIN + (y1 - y) / span * plot,
        )
    };
    for p in &layout.points {
        if let Some(k) = clique_langs.iter().position(|l| *l == p.lang) {
            cliques.entry(p.sentence_id).or_insert_with(|| vec![None; clique_langs.len()])[k] =
                Some(map(p.x, p.y));
        }
    }

    let mut s = String::new();
    s.push_str("<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n");
    let _ = writeln!(
        s,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" version=\"1.1\" width=\"{WIDTH}\" height=\"{HEIGHT}\" viewBox=\"0 0 {WIDTH} {HEIGHT}\">"
    );
    let _ = writeln!(s, "<title>{}</title>", escape(title));
    let _ = writeln!(s, "<rect x=\"0\" y=\"0\" width=\"{WIDTH}\" height=\"{HEIGHT}\" fill=\"#ffffff\"/>");
    s.push_str("<g id=\"cliques\" stroke=\"#888888\" stroke-width=\"0.6\" stroke-opacity=\"0.5\">\n");
    for (id, slots) in &cliques {
        let pts = slots
            .iter()
            .enumerate()
            .map(|(k, v)| v.ok_or_else(|| Error::MissingCliqueMember(format!("{id}/{}", clique_langs[k]))))
            .collect::<Result<Vec<_>>>()?;
        let _ = writeln!(s, "<g class=\"clique\" id=\"clique-{id}\">");
        for i in 0..pts.len() {
            for j in i + 1..pts.len() {
                let _ = writeln!(
                    s,
                    "<line x1=\"{:.2}\" y1=\"{:.2}\" x2=\"{:.2}\" y2=\"{:.2}\"/>",
                    pts[i].0, pts[i].1, pts[j].0, pts[j].1
                );
            }
        }
        s.push_str("</g>\n");
    }
    s.push_str("</g>\n<g id=\"points\" stroke=\"none\">\n");
    for p in &layout.points {
        let k = langs.iter().position(|l| *l == p.lang).expect("collected above");
        let (x, y) = map(p.x, p.y);
        let _ = writeln!(
            s,
            "<circle cx=\"{x:.2}\" cy=\"{y:.2}\" r=\"3\" fill=\"{}\"><title>{} {}</title></circle>",
            PALETTE[k % PALETTE.len()],
            escape(&p.lang),
            p.sentence_id
        );
    }
    s.push_str("</g>\n<g id=\"legend\" font-family=\"sans-serif\" font-size=\"12\">\n");
    let lx = WIDTH - LEGEND + 10.0;
    for (k, l) in langs.iter().enumerate() {
        let y = MARGIN + 18.0 * k as f64;
        let _ = writeln!(
            s,
            "<rect x=\"{lx}\" y=\"{y}\" width=\"10\" height=\"10\" fill=\"{}\"/><text x=\"{}\" y=\"{}\">{}</text>",
            PALETTE[k % PALETTE.len()],
            lx + 16.0,
            y + 9.0,
            escape(l)
        );
    }
    s.push_str("</g>\n</svg>\n");
    Ok(s)
}
